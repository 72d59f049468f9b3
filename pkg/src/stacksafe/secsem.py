"""Notional security semantics: classes, views, contexts and the operations
that update them alongside machine execution.

Views are byte strings indexed by element index (see ``machine.Layout``), so
they are immutable, hashable and cheap to copy. The machine is never affected
by anything in this module.
"""
from __future__ import annotations

import enum
import re
from array import array
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

from stacksafe import _core
from stacksafe import _pykernel as K
from stacksafe.machine import (
    ARG_REGS, CALLEE_SAVED, CALLER_SAVED, REG_INDEX, Element, Layout, MachineError,
    MachineState, MemWord, Program, Reg, element,
)
from stacksafe.policy import MicroPolicy, PolicyState


class SecClass(enum.IntEnum):
    PUBLIC = 0
    ACTIVE = 1
    SEALED = 2
    FREE = 3


PUBLIC, ACTIVE, SEALED, FREE = (int(c) for c in SecClass)
_CLR_IDX = tuple(REG_INDEX[r] for r in CALLER_SAVED)


class ContextError(Exception):
    """The annotations drive the context into an impossible shape (e.g. a return
    with no pending frame)."""


class ConfigError(ValueError):
    pass


class View:
    __slots__ = ("layout", "data")

    def __init__(self, layout: Layout, data: bytes):
        self.layout = layout
        self.data = bytes(data)

    def __getitem__(self, el) -> SecClass:
        return SecClass(self.data[self.layout.index(el)])

    def indices(self, cls: int) -> list[int]:
        return [i for i, c in enumerate(self.data) if c == cls]

    def of(self, cls: int) -> frozenset:
        """``l(V)``: the elements with class ``cls``."""
        return frozenset(self.layout.element(i) for i in self.indices(cls))

    def set(self, mapping: Mapping) -> "View":
        d = bytearray(self.data)
        for el, cls in mapping.items():
            d[self.layout.index(el)] = int(cls)
        return View(self.layout, d)

    def serialize(self) -> str:
        """Run-length text form, e.g. ``pc:P ... 980-996:A``."""
        out = []
        lay = self.layout
        letters = "PASF"
        i = 0
        n = len(self.data)
        while i < n:
            el = lay.element(i)
            c = self.data[i]
            if isinstance(el, MemWord):
                j = i
                while j + 1 < n and self.data[j + 1] == c and isinstance(lay.element(j + 1), MemWord) \
                        and lay.element(j + 1).address == lay.element(j).address + 4:
                    j += 1
                last = lay.element(j).address
                out.append(f"{el.address}-{last}:{letters[c]}" if j > i else f"{el.address}:{letters[c]}")
                i = j + 1
            else:
                out.append(f"{el!r}:{letters[c]}")
                i += 1
        return " ".join(out)

    def __eq__(self, other) -> bool:
        return isinstance(other, View) and self.data == other.data and self.layout == other.layout

    def __hash__(self) -> int:
        return hash(self.data)

    def __repr__(self) -> str:
        return f"View({self.serialize()})"


class PendingFrame(NamedTuple):
    view: View
    ret_target: int
    sp_target: int


Region = Union[tuple, None]  # (base, bound) half-open, or None for "no capability"


@dataclass(frozen=True)
class SecurityContext:
    current: View
    pending: tuple = ()
    prov: tuple | None = None  # per-element Region when provenance is enabled

    @property
    def depth(self) -> int:
        return len(self.pending)


@dataclass(frozen=True)
class SemConfig:
    argreg_class: str = "public"  # class given to argument registers at a call
    provenance: bool = False

    def __post_init__(self):
        if self.argreg_class not in ("public", "active"):
            raise ConfigError("argreg_class must be 'public' or 'active'")


DEFAULT_CONFIG = SemConfig()


# ------------------------------------------------------------------ ops

@dataclass(frozen=True)
class Call:
    target: int
    arg_regs: tuple = ()
    stack_args: tuple = ()  # (reg, off, sz) triples


@dataclass(frozen=True)
class TailCall:
    target: int
    arg_regs: tuple = ()
    stack_args: tuple = ()


@dataclass(frozen=True)
class Return:
    pass


@dataclass(frozen=True)
class Alloc:
    public: bool
    off: int
    sz: int


@dataclass(frozen=True)
class Dealloc:
    off: int
    sz: int


@dataclass(frozen=True)
class Promote:
    dst: str
    base: str
    off: int
    sz: int


@dataclass(frozen=True)
class Propagate:
    src: object
    dst: object


@dataclass(frozen=True)
class Clear:
    k: object


SecOp = Union[Call, TailCall, Return, Alloc, Dealloc, Promote, Propagate, Clear]


def _check_words(*vals: int) -> None:
    for v in vals:
        if v % 4:
            raise MachineError(f"offset/size {v} is not a word multiple")


def initial_context(layout: Layout, entry_args: Iterable[str] = (),
                    config: SemConfig = DEFAULT_CONFIG) -> SecurityContext:
    data = bytearray([PUBLIC]) * layout.size
    for i in layout.stack_indices():
        data[i] = FREE
    for r in CALLER_SAVED:
        data[REG_INDEX[r]] = FREE
    for r in CALLEE_SAVED:
        data[REG_INDEX[r]] = SEALED
    for r in entry_args:
        if r not in CALLER_SAVED:
            raise ConfigError(f"entry argument {r} is not a caller-saved register")
        data[REG_INDEX[r]] = ACTIVE
    prov = (None,) * layout.size if config.provenance else None
    return SecurityContext(View(layout, data), (), prov)


def _range_indices(layout: Layout, base: int, off: int, sz: int) -> list[int]:
    out = []
    for a in range(base + off, base + off + sz, 4):
        idx = layout.mem_index(a & 0xFFFFFFFF)
        if idx is not None:
            out.append(idx)
    return out


def _passed_idx(layout: Layout, stack_args, vals: Sequence[int]) -> set[int]:
    s: set[int] = set()
    for reg, off, sz in stack_args:
        s.update(_range_indices(layout, vals[REG_INDEX[reg]], off, sz))
    return s


def passed(stack_args, m: MachineState) -> frozenset:
    return frozenset(m.layout.element(i) for i in _passed_idx(m.layout, stack_args, m.vals))


def _capped_idx(layout: Layout, K_idx: Iterable[int], prov: Sequence) -> set[int]:
    out = set(K_idx)
    work = list(out)
    while work:
        k = work.pop()
        region = prov[k]
        if region is None:
            continue
        base, bound = region
        for a in range(base, bound, 4):
            idx = layout.mem_index(a)
            if idx is not None and idx not in out:
                out.add(idx)
                work.append(idx)
    return out


def capped(K: Iterable, prov: Union[Sequence, Mapping], layout: Layout) -> frozenset:
    """Least fixed point of K plus every memory word inside a region held by
    an element already in the set."""
    if isinstance(prov, Mapping):
        seq = [None] * layout.size
        for el, region in prov.items():
            seq[layout.index(el)] = region
        prov = seq
    idx = _capped_idx(layout, (layout.index(k) for k in K), prov)
    return frozenset(layout.element(i) for i in idx)


def _call_view(layout: Layout, v: bytes, vals, op, cfg: SemConfig, prov, new_cls: int) -> bytes:
    d = bytearray(v)
    for i in _CLR_IDX:
        d[i] = FREE
    arg_cls = PUBLIC if cfg.argreg_class == "public" else ACTIVE
    arg_idx = [REG_INDEX[r] for r in op.arg_regs]
    for i in arg_idx:
        d[i] = arg_cls
    keep = _passed_idx(layout, op.stack_args, vals)
    if prov is not None:
        keep |= _capped_idx(layout, arg_idx, prov)
    if arg_cls == ACTIVE:
        keep.update(arg_idx)
    for i, c in enumerate(d):
        if c == ACTIVE and i not in keep:
            d[i] = new_cls
    return bytes(d)


def _apply(layout: Layout, vals: Sequence[int], c: SecurityContext, op, cfg: SemConfig) -> SecurityContext:
    kind = type(op)
    if kind is Alloc or kind is Dealloc:
        _check_words(op.off, op.sz)
        d = bytearray(c.current.data)
        idxs = _range_indices(layout, vals[REG_INDEX["sp"]], op.off, op.sz)
        if kind is Alloc:
            new = PUBLIC if op.public else ACTIVE
            for i in idxs:
                if d[i] == FREE:
                    d[i] = new
        else:
            for i in idxs:
                if d[i] == ACTIVE:
                    d[i] = FREE
        return SecurityContext(View(layout, d), c.pending, c.prov)
    if kind is Call:
        nv = _call_view(layout, c.current.data, vals, op, cfg, c.prov, SEALED)
        frame = PendingFrame(c.current, (vals[0] + 4) & 0xFFFFFFFF, vals[REG_INDEX["sp"]])
        return SecurityContext(View(layout, nv), (frame,) + c.pending, c.prov)
    if kind is TailCall:
        nv = _call_view(layout, c.current.data, vals, op, cfg, c.prov, FREE)
        return SecurityContext(View(layout, nv), c.pending, c.prov)
    if kind is Return:
        if not c.pending:
            raise ContextError("return with no pending frame")
        return SecurityContext(c.pending[0].view, c.pending[1:], c.prov)
    if c.prov is None:
        raise ConfigError("provenance operation with provenance disabled")
    prov = list(c.prov)
    if kind is Promote:
        _check_words(op.off, op.sz)
        base = vals[REG_INDEX[op.base]]
        prov[REG_INDEX[op.dst]] = ((base + op.off) & 0xFFFFFFFF, (base + op.off + op.sz) & 0xFFFFFFFF)
    elif kind is Propagate:
        prov[layout.index(op.dst)] = c.prov[layout.index(op.src)]
    elif kind is Clear:
        prov[layout.index(op.k)] = None
    else:
        raise TypeError(f"not a security operation: {op!r}")
    return SecurityContext(c.current, c.pending, tuple(prov))


def apply_op(m: MachineState, c: SecurityContext, op: SecOp,
             config: SemConfig = DEFAULT_CONFIG) -> SecurityContext:
    """Context after ``op``; ``m`` is the machine state *before* the step."""
    return _apply(m.layout, m.vals, c, op, config)


def fold_ops(layout: Layout, vals: Sequence[int], c: SecurityContext, ops,
             config: SemConfig = DEFAULT_CONFIG) -> SecurityContext:
    for op in ops:
        c = _apply(layout, vals, c, op, config)
    return c


def depth_delta(ops) -> int:
    return sum(1 if type(o) is Call else -1 if type(o) is Return else 0 for o in ops)


# ------------------------------------------------------------ annotations

class AnnotationMap(dict):
    """Code address -> list of security operations (missing = empty)."""

    def ops(self, addr: int) -> list:
        return self.get(addr, [])


def check_annotations(annot: Mapping[int, list], code) -> None:
    for addr in annot:
        if addr not in code.instrs:
            raise MachineError(f"annotation at {addr} has no instruction")


def make_program(code, annot: Mapping[int, list]) -> Program:
    """Flatten a code image plus annotations for the kernels."""
    check_annotations(annot, code)
    dd = {}
    for addr, ops in annot.items():
        delta = depth_delta(ops)
        if delta:
            dd[addr] = delta
    return Program(code, dd, [a for a, ops in annot.items() if ops])


_OP_LINE = re.compile(r"^\s*(\d+)\s*:\s*(\w+)\s*(?:\((.*)\))?\s*$")


def _split_args(s: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in s:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _parse_list(s: str) -> list[str]:
    s = s.strip()
    if not (s.startswith("[") and s.endswith("]")):
        raise MachineError(f"expected a list, got {s!r}")
    return _split_args(s[1:-1])


def _parse_call(args: list[str]):
    target = int(args[0], 0)
    regs = tuple(_parse_list(args[1])) if len(args) > 1 else ()
    sas = []
    for item in (_parse_list(args[2]) if len(args) > 2 else []):
        r, off, sz = _split_args(item.strip()[1:-1])
        sas.append((r, int(off), int(sz)))
    return target, regs, tuple(sas)


def parse_annotations(text: str) -> AnnotationMap:
    """Lines ``ADDR: op(args)``; repeated addresses accumulate in file order."""
    annot = AnnotationMap()
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        mm = _OP_LINE.match(line)
        if not mm:
            raise MachineError(f"cannot parse annotation {line!r}")
        addr, name, argtext = int(mm.group(1)), mm.group(2).lower(), mm.group(3) or ""
        args = _split_args(argtext)
        if name in ("call", "tailcall"):
            t, regs, sas = _parse_call(args)
            op = (Call if name == "call" else TailCall)(t, regs, sas)
        elif name == "return":
            op = Return()
        elif name == "alloc":
            if args[0] not in ("pub", "priv"):
                raise MachineError("alloc flag must be pub or priv")
            op = Alloc(args[0] == "pub", int(args[1]), int(args[2]))
        elif name == "dealloc":
            op = Dealloc(int(args[0]), int(args[1]))
        elif name == "promote":
            op = Promote(args[0], args[1], int(args[2]), int(args[3]))
        elif name == "propagate":
            op = Propagate(element(args[0]), element(args[1]))
        elif name == "clear":
            op = Clear(element(args[0]))
        else:
            raise MachineError(f"unknown operation {name!r}")
        annot.setdefault(addr, []).append(op)
    return annot


def format_op(op) -> str:
    if isinstance(op, (Call, TailCall)):
        name = "call" if isinstance(op, Call) else "tailcall"
        sas = ",".join(f"({r},{o},{s})" for r, o, s in op.stack_args)
        return f"{name}({op.target},[{','.join(op.arg_regs)}],[{sas}])"
    if isinstance(op, Return):
        return "return"
    if isinstance(op, Alloc):
        return f"alloc({'pub' if op.public else 'priv'},{op.off},{op.sz})"
    if isinstance(op, Dealloc):
        return f"dealloc({op.off},{op.sz})"
    if isinstance(op, Promote):
        return f"promote({op.dst},{op.base},{op.off},{op.sz})"
    if isinstance(op, Propagate):
        return f"propagate({op.src!r},{op.dst!r})"
    return f"clear({op.k!r})"


def format_annotations(annot: Mapping[int, list]) -> str:
    return "".join(f"{addr}: {format_op(op)}\n" for addr in sorted(annot) for op in annot[addr])


# ------------------------------------------------------------ combined step

@dataclass(frozen=True)
class CombinedState:
    m: MachineState
    ps: PolicyState
    ctx: SecurityContext


def combined_step(s: CombinedState, policy: MicroPolicy, annot: Mapping[int, list],
                  prog: Program, config: SemConfig = DEFAULT_CONFIG):
    """Guarded step, then fold the instruction's operations over the context
    using the pre-step machine state. Returns ``(s', ops, event, status)``;
    on failstop or halt the combined state is unchanged and ``ops`` is empty."""
    m = s.m
    vals, tags, psa = array("q", m.vals), array("q", m.tags), s.ps.to_array()
    st, ev = _core.kernel.step(vals, tags, psa, prog.arrays, prog.params, policy.flags)
    if st != K.OK:
        return s, [], None, st
    ops = annot.get(m.pc, [])
    ctx = fold_ops(m.layout, m.vals, s.ctx, ops, config) if ops else s.ctx
    return (CombinedState(MachineState(m.layout, vals, tags), PolicyState(psa), ctx),
            ops, ev if ev >= 0 else None, st)

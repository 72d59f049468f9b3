"""Word-granular tagged RISC-style machine.

State is a flat vector of (payload, tag) pairs indexed by element. Index 0 is
the program counter, indices 1..15 are the register file, and the remaining
indices are the memory words of the stack and globals regions. Code lives in a
separate symbolic image and is not data-addressable.
"""
from __future__ import annotations

import enum
import re
from array import array
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Union

import numpy as np

from stacksafe import _core

MASK32 = 0xFFFFFFFF

REGISTERS: tuple[str, ...] = (
    "zero", "ra", "sp",
    "a0", "a1", "a2", "a3",
    "t0", "t1", "t2", "t3",
    "s0", "s1", "s2", "s3",
)
REG_INDEX = {name: i + 1 for i, name in enumerate(REGISTERS)}
CALLER_SAVED: tuple[str, ...] = ("a0", "a1", "a2", "a3", "t0", "t1", "t2", "t3")
CALLEE_SAVED: tuple[str, ...] = ("s0", "s1", "s2", "s3")
ARG_REGS: tuple[str, ...] = ("a0", "a1", "a2", "a3")
MEM_BASE_INDEX = 1 + len(REGISTERS)


class MachineError(Exception):
    """Malformed machine input (bad element, overlapping regions, parse errors)."""


@dataclass(frozen=True, slots=True)
class _PC:
    def __repr__(self) -> str:
        return "PC"


PC = _PC()


@dataclass(frozen=True, slots=True)
class Reg:
    name: str

    def __post_init__(self):
        if self.name not in REG_INDEX:
            raise MachineError(f"unknown register {self.name!r}")

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True, slots=True)
class MemWord:
    address: int

    def __post_init__(self):
        if self.address % 4 or not 0 <= self.address <= MASK32:
            raise MachineError(f"unaligned or out-of-range word address {self.address}")

    def __repr__(self) -> str:
        return str(self.address)


Element = Union[_PC, Reg, MemWord]


def element(spec: Union[str, int, Element]) -> Element:
    """Coerce ``"a0"``, ``980`` or ``"pc"`` into an element."""
    if isinstance(spec, (_PC, Reg, MemWord)):
        return spec
    if isinstance(spec, int):
        return MemWord(spec)
    if spec.lower() == "pc":
        return PC
    if spec.lstrip("-").isdigit():
        return MemWord(int(spec))
    return Reg(spec)


class Value(NamedTuple):
    payload: int
    tag: int


@dataclass(frozen=True)
class Layout:
    """Region descriptor; all bounds in bytes, half-open, word aligned."""

    code_base: int
    code_size: int
    stack_base: int
    stack_size: int
    globals_base: int
    globals_size: int
    out: int
    _elements: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        regions = {
            "code": (self.code_base, self.code_base + self.code_size),
            "stack": (self.stack_base, self.stack_base + self.stack_size),
            "globals": (self.globals_base, self.globals_base + self.globals_size),
        }
        for name, (lo, hi) in regions.items():
            if lo % 4 or hi % 4 or hi <= lo or lo < 0 or hi > MASK32 + 1:
                raise MachineError(f"bad {name} region [{lo}, {hi})")
        spans = sorted(regions.values())
        for (lo1, hi1), (lo2, _) in zip(spans, spans[1:]):
            if lo2 < hi1:
                raise MachineError("regions overlap")
        if not self.globals_base <= self.out < self.globals_base + self.globals_size or self.out % 4:
            raise MachineError("OUT must be a word inside the globals region")
        elems: list[Element] = [PC] + [Reg(r) for r in REGISTERS]
        elems += [MemWord(a) for a in range(self.stack_base, self.stack_top, 4)]
        elems += [MemWord(a) for a in range(self.globals_base, self.globals_base + self.globals_size, 4)]
        object.__setattr__(self, "_elements", tuple(elems))

    @property
    def stack_top(self) -> int:
        return self.stack_base + self.stack_size

    @property
    def size(self) -> int:
        return len(self._elements)

    @property
    def elements(self) -> tuple:
        return self._elements

    @property
    def n_stack(self) -> int:
        return self.stack_size // 4

    def in_stack(self, addr: int) -> bool:
        return self.stack_base <= addr < self.stack_top

    def in_globals(self, addr: int) -> bool:
        return self.globals_base <= addr < self.globals_base + self.globals_size

    def in_code(self, addr: int) -> bool:
        return self.code_base <= addr < self.code_base + self.code_size

    def mem_index(self, addr: int) -> int | None:
        if addr % 4:
            return None
        if self.in_stack(addr):
            return MEM_BASE_INDEX + (addr - self.stack_base) // 4
        if self.in_globals(addr):
            return MEM_BASE_INDEX + self.n_stack + (addr - self.globals_base) // 4
        return None

    def index(self, el: Union[Element, str, int]) -> int:
        el = element(el)
        if el is PC:
            return 0
        if isinstance(el, Reg):
            return REG_INDEX[el.name]
        idx = self.mem_index(el.address)
        if idx is None:
            raise MachineError(f"address {el.address} is not a data word of this layout")
        return idx

    def element(self, index: int) -> Element:
        return self._elements[index]

    def stack_indices(self) -> range:
        return range(MEM_BASE_INDEX, MEM_BASE_INDEX + self.n_stack)

    def kernel_params(self) -> tuple[int, ...]:
        return (self.code_base, self.code_size // 4, self.stack_base, self.stack_top,
                self.globals_base, self.globals_base + self.globals_size, self.out,
                MEM_BASE_INDEX, MEM_BASE_INDEX + self.n_stack)


class Op(enum.IntEnum):
    ADD = 0
    SUB = 1
    AND = 2
    OR = 3
    XOR = 4
    ADDI = 5
    LI = 6
    MOV = 7
    LW = 8
    SW = 9
    JAL = 10
    JALR = 11
    BEQ = 12
    BNE = 13
    J = 14
    NOP = 15
    HALT = 16


class Kind(enum.IntEnum):
    """Instruction tags consumed by the micro-policies."""

    PLAIN = 0
    CALL = 1
    HEADER1 = 2
    HEADER2 = 3
    RETURN1 = 4
    RETURN2 = 5
    RETURN3 = 6
    TAILCALL = 7
    SAVEREG = 8
    RESTOREREG = 9
    STOREARG = 10


class Instruction(NamedTuple):
    """``rd``/``rs1``/``rs2`` are register names; ``imm`` doubles as the
    absolute target of JAL/J/BEQ/BNE. SW stores ``rs2`` to ``imm(rs1)``."""

    op: Op
    rd: str = "zero"
    rs1: str = "zero"
    rs2: str = "zero"
    imm: int = 0

    def __str__(self) -> str:
        o = self.op
        if o in (Op.ADD, Op.SUB, Op.AND, Op.OR, Op.XOR):
            return f"{o.name} {self.rd},{self.rs1},{self.rs2}"
        if o is Op.ADDI:
            return f"ADDI {self.rd},{self.rs1},{self.imm}"
        if o is Op.LI:
            return f"LI {self.rd},{self.imm}"
        if o is Op.MOV:
            return f"MOV {self.rd},{self.rs1}"
        if o is Op.LW:
            return f"LW {self.rd},{self.imm}({self.rs1})"
        if o is Op.SW:
            return f"SW {self.rs2},{self.imm}({self.rs1})"
        if o is Op.JAL:
            return f"JAL {self.imm},{self.rd}"
        if o is Op.JALR:
            if self.rd == "zero" and self.imm == 0:
                return f"JALR {self.rs1}"
            return f"JALR {self.rd},{self.rs1},{self.imm}"
        if o in (Op.BEQ, Op.BNE):
            return f"{o.name} {self.rs1},{self.rs2},{self.imm}"
        if o is Op.J:
            return f"J {self.imm}"
        return o.name


@dataclass
class CodeImage:
    """Address -> (instruction, policy kind)."""

    layout: Layout
    instrs: dict[int, Instruction] = field(default_factory=dict)
    kinds: dict[int, Kind] = field(default_factory=dict)

    def __post_init__(self):
        for addr in self.instrs:
            if addr % 4 or not self.layout.in_code(addr):
                raise MachineError(f"instruction at {addr} outside code region")

    def kind(self, addr: int) -> Kind:
        return self.kinds.get(addr, Kind.PLAIN)

    def __len__(self) -> int:
        return len(self.instrs)


class MachineState:
    """Immutable total map from elements to tagged values."""

    __slots__ = ("layout", "vals", "tags")

    def __init__(self, layout: Layout, vals: Iterable[int], tags: Iterable[int]):
        self.layout = layout
        self.vals = tuple(vals)
        self.tags = tuple(tags)
        if len(self.vals) != layout.size or len(self.tags) != layout.size:
            raise MachineError("state vector does not match layout")

    @classmethod
    def blank(cls, layout: Layout, pc: int = 0, sp: int | None = None) -> "MachineState":
        vals = [0] * layout.size
        vals[0] = pc
        vals[REG_INDEX["sp"]] = layout.stack_top if sp is None else sp
        return cls(layout, vals, [0] * layout.size)

    def __getitem__(self, el) -> Value:
        i = self.layout.index(el)
        return Value(self.vals[i], self.tags[i])

    def payload(self, el) -> int:
        return self.vals[self.layout.index(el)]

    @property
    def pc(self) -> int:
        return self.vals[0]

    @property
    def sp(self) -> int:
        return self.vals[REG_INDEX["sp"]]

    def update(self, values: Mapping | None = None, tags: Mapping | None = None) -> "MachineState":
        vals, tgs = list(self.vals), list(self.tags)
        for el, v in (values or {}).items():
            i = self.layout.index(el)
            vals[i] = v & MASK32 if i != REG_INDEX["zero"] else 0
        for el, t in (tags or {}).items():
            tgs[self.layout.index(el)] = t
        return MachineState(self.layout, vals, tgs)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MachineState) and self.layout == other.layout
                and self.vals == other.vals and self.tags == other.tags)

    def __hash__(self) -> int:
        return hash((self.vals, self.tags))

    def __repr__(self) -> str:
        return f"MachineState(pc={self.pc}, sp={self.sp})"


class Program:
    """Code image plus per-address annotation facts, flattened for the kernels."""

    def __init__(self, code: CodeImage, ddelta: Mapping[int, int] | None = None,
                 annotated: Iterable[int] = ()):
        lay = code.layout
        n = lay.code_size // 4
        self.code = code
        self.layout = lay
        op = [-1] * n
        rd = [0] * n
        rs1 = [0] * n
        rs2 = [0] * n
        imm = [0] * n
        kind = [0] * n
        dd = [0] * n
        ann = [0] * n
        for addr, ins in code.instrs.items():
            i = (addr - lay.code_base) // 4
            op[i] = int(ins.op)
            rd[i], rs1[i], rs2[i] = REG_INDEX[ins.rd], REG_INDEX[ins.rs1], REG_INDEX[ins.rs2]
            imm[i] = ins.imm
            kind[i] = int(code.kind(addr))
        for addr, delta in (ddelta or {}).items():
            dd[(addr - lay.code_base) // 4] = delta
        for addr in annotated:
            ann[(addr - lay.code_base) // 4] = 1
        self.lists = (op, rd, rs1, rs2, imm, kind, dd, ann)
        self.params = lay.kernel_params()
        self.arrays = tuple(array("q", a) for a in self.lists)


def raw_step(m: MachineState, code: CodeImage | Program) -> tuple[MachineState, int | None, bool]:
    """One unguarded ISA step.

    Returns ``(m', event, halted)`` where ``event`` is the payload written to
    OUT or ``None`` for the silent event. A halted machine self-loops: ``m'`` is
    ``m`` and the step is silent.
    """
    prog = code if isinstance(code, Program) else Program(code)
    vals = list(m.vals)
    event, halted = _core.pykernel.raw_exec(vals, prog.lists, prog.params)
    if halted:
        return m, None, True
    return MachineState(m.layout, vals, m.tags), event, False


def diff_set(m: MachineState, n: MachineState) -> frozenset:
    if m.layout != n.layout:
        raise MachineError("states have different layouts")
    lay = m.layout
    return frozenset(lay.element(i) for i, (a, b) in enumerate(zip(m.vals, n.vals)) if a != b)


def compatible(m: MachineState, n: MachineState) -> bool:
    return m.layout == n.layout and m.tags == n.tags


def _resample(rng: np.random.Generator, old: int, domain: int | None) -> int:
    if domain is None:
        while True:
            v = int(rng.integers(0, 1 << 32))
            if v != old:
                return v
    if domain < 2:
        return old
    v = int(rng.integers(0, domain - 1))
    return v + 1 if v >= old else v


def k_variant(m: MachineState, K: Iterable, rng: np.random.Generator,
              domain: int | None = None) -> MachineState:
    """Random K-variant of ``m``: tags kept, each element of K redrawn to a
    different payload except with probability 1/4 it is kept.

    ``domain`` restricts payloads to ``range(domain)`` (exhaustive-oracle mode).
    """
    lay = m.layout
    idxs = sorted(lay.index(k) for k in K)
    if 0 in idxs or REG_INDEX["zero"] in idxs:
        raise MachineError("PC and zero are never varied")
    vals = list(m.vals)
    for i in idxs:
        if rng.random() >= 0.25:
            vals[i] = _resample(rng, vals[i], domain)
    return MachineState(lay, vals, m.tags)


def all_variants(m: MachineState, K: Iterable, domain: int = 2):
    """Every K-variant over ``range(domain)`` payloads (tiny-domain oracle)."""
    lay = m.layout
    idxs = sorted(lay.index(k) for k in K)
    if 0 in idxs or REG_INDEX["zero"] in idxs:
        raise MachineError("PC and zero are never varied")
    for combo in np.ndindex(*([domain] * len(idxs))):
        vals = list(m.vals)
        for i, v in zip(idxs, combo):
            vals[i] = int(v)
        yield MachineState(lay, vals, m.tags)


# ----------------------------------------------------------------- assembly

_LINE = re.compile(r"^\s*(?:(?P<label>[A-Za-z_]\w*)\s*,\s*)?(?P<addr>\d+)\s*:\s*(?P<body>.*)$")
_MEMOP = re.compile(r"^(-?\d+)?\((\w+)\)$")


@dataclass
class AsmProgram:
    layout: Layout
    code: CodeImage
    entry: int
    init: dict = field(default_factory=dict)
    entry_args: tuple[str, ...] = ()


def _int(tok: str, symbols: Mapping[str, int]) -> int:
    tok = tok.strip()
    if tok in symbols:
        return symbols[tok]
    return int(tok, 0)


def _parse_instruction(text: str, symbols: Mapping[str, int]) -> Instruction:
    parts = text.split(None, 1)
    name = parts[0].upper()
    args = [a.strip() for a in parts[1].split(",")] if len(parts) > 1 else []
    try:
        op = Op[name]
    except KeyError:
        raise MachineError(f"unknown opcode {name}") from None

    def mem(arg: str) -> tuple[int, str]:
        mm = _MEMOP.match(arg)
        if mm:
            return int(mm.group(1) or 0), mm.group(2)
        return _int(arg, symbols), "zero"

    try:
        if op in (Op.ADD, Op.SUB, Op.AND, Op.OR, Op.XOR):
            return Instruction(op, args[0], args[1], args[2])
        if op is Op.ADDI:
            return Instruction(op, args[0], args[1], imm=_int(args[2], symbols))
        if op is Op.LI:
            return Instruction(op, args[0], imm=_int(args[1], symbols))
        if op is Op.MOV:
            return Instruction(op, args[0], args[1])
        if op is Op.LW:
            off, base = mem(args[1])
            return Instruction(op, args[0], base, imm=off)
        if op is Op.SW:
            off, base = mem(args[1])
            return Instruction(op, rs1=base, rs2=args[0], imm=off)
        if op is Op.JAL:
            return Instruction(op, args[1] if len(args) > 1 else "ra", imm=_int(args[0], symbols))
        if op is Op.JALR:
            if len(args) == 1:
                return Instruction(op, "zero", args[0])
            return Instruction(op, args[0], args[1], imm=_int(args[2], symbols) if len(args) > 2 else 0)
        if op in (Op.BEQ, Op.BNE):
            return Instruction(op, rs1=args[0], rs2=args[1], imm=_int(args[2], symbols))
        if op is Op.J:
            return Instruction(op, imm=_int(args[0], symbols))
        if args:
            raise MachineError(f"{name} takes no operands")
        return Instruction(op)
    except IndexError:
        raise MachineError(f"missing operands in {text!r}") from None


def parse_assembly(text: str) -> AsmProgram:
    """Parse the line-oriented assembly format.

    Header directives: ``.code BASE [SIZE]``, ``.stack BASE SIZE``,
    ``.globals BASE SIZE``, ``.out ADDR``, ``.entry ADDR``, ``.args r...``,
    ``.init ELEMENT VALUE``. Instruction lines are ``[LABEL,] ADDR: OPCODE
    operands [@kind]``. ``out`` and labels may be used as operands.
    """
    hdr: dict[str, list[str]] = {}
    init: dict = {}
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            key, *rest = line.split()
            if key == ".init":
                init[element(rest[0])] = int(rest[1], 0)
            else:
                hdr[key] = rest
            continue
        lines.append(line)

    def num(key, i, default=None):
        vals = hdr.get(key)
        if vals is None or len(vals) <= i:
            if default is None:
                raise MachineError(f"missing {key} directive")
            return default
        return int(vals[i], 0)

    parsed = []
    symbols: dict[str, int] = {}
    for line in lines:
        mm = _LINE.match(line)
        if not mm:
            raise MachineError(f"cannot parse line {line!r}")
        addr = int(mm.group("addr"))
        if mm.group("label"):
            symbols[mm.group("label")] = addr
        body = mm.group("body")
        kind = Kind.PLAIN
        if "@" in body:
            body, k = body.rsplit("@", 1)
            kind = Kind[k.strip().upper()]
        parsed.append((addr, body.strip(), kind))
    out = num(".out", 0)
    symbols["out"] = out
    code_base = num(".code", 0, 0)
    max_addr = max((a for a, _, _ in parsed), default=code_base)
    code_size = num(".code", 1, max_addr - code_base + 4)
    layout = Layout(
        code_base=code_base, code_size=code_size,
        stack_base=num(".stack", 0), stack_size=num(".stack", 1),
        globals_base=num(".globals", 0, out), globals_size=num(".globals", 1, 4),
        out=out,
    )
    code = CodeImage(layout)
    for addr, body, kind in parsed:
        if addr in code.instrs:
            raise MachineError(f"duplicate instruction at {addr}")
        code.instrs[addr] = _parse_instruction(body, symbols)
        if kind is not Kind.PLAIN:
            code.kinds[addr] = kind
    CodeImage.__post_init__(code)
    return AsmProgram(layout, code, entry=num(".entry", 0, code_base), init=init,
                      entry_args=tuple(hdr.get(".args", ())))


def format_assembly(prog: AsmProgram) -> str:
    lay = prog.layout
    out = [
        f".code {lay.code_base} {lay.code_size}",
        f".stack {lay.stack_base} {lay.stack_size}",
        f".globals {lay.globals_base} {lay.globals_size}",
        f".out {lay.out}",
        f".entry {prog.entry}",
    ]
    if prog.entry_args:
        out.append(".args " + " ".join(prog.entry_args))
    for el, v in prog.init.items():
        out.append(f".init {el!r} {v}")
    for addr in sorted(prog.code.instrs):
        ins = prog.code.instrs[addr]
        kind = prog.code.kind(addr)
        suffix = f" @{kind.name.lower()}" if kind is not Kind.PLAIN else ""
        out.append(f"{addr}: {ins}{suffix}")
    return "\n".join(out) + "\n"

"""Tag-based stack-protection monitors and the policy-guarded step.

Tags are small integers: the low four bits hold the tag kind and the rest hold
a color. Instruction kinds live in the code image (``machine.Kind``) rather
than in data tags. The transfer function itself is implemented by the step
kernels; a ``MicroPolicy`` is the immutable flag set that selects its rules.
"""
from __future__ import annotations

from array import array
from dataclasses import dataclass
from typing import NamedTuple

from stacksafe import _core
from stacksafe import _pykernel as K
from stacksafe.machine import (
    CALLEE_SAVED, REG_INDEX, Layout, MachineError, MachineState, Program, CodeImage,
)

NOTAG, UNUSED, CELL, PCCOLOR, REGOWNED, RETADDR = K.NOTAG, K.UNUSED, K.CELL, K.PCCOLOR, K.REGOWNED, K.RETADDR
TAG_NAMES = {NOTAG: "NoTag", UNUSED: "Unused", CELL: "Cell", PCCOLOR: "PCColor",
             REGOWNED: "RegOwned", RETADDR: "RetAddr"}


def make_tag(kind: int, color: int = 0) -> int:
    return kind | (color << 4)


def tag_kind(tag: int) -> int:
    return tag & 15


def tag_color(tag: int) -> int:
    return tag >> 4


def describe_tag(tag: int) -> str:
    kind = tag & 15
    if kind in (NOTAG, UNUSED):
        return TAG_NAMES[kind]
    return f"{TAG_NAMES[kind]}({tag >> 4})"


class ConfigError(ValueError):
    """Unknown policy selector or mutant id."""


SEQ_NAMES = ("none", "called", "header1", "entry", "return1", "return2")


class PolicyState:
    """Monitor state: current color, next fresh color, depth, sequencing
    state and the stack of (saved color, frame size) pairs."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = tuple(data)
        if len(self.data) != K.PS_SIZE:
            raise ValueError("bad policy state vector")

    @classmethod
    def initial(cls, seq: int = K.S_CALLED) -> "PolicyState":
        d = [0] * K.PS_SIZE
        d[1] = 1
        d[3] = seq
        return cls(d)

    color = property(lambda self: self.data[0])
    next_fresh = property(lambda self: self.data[1])
    depth = property(lambda self: self.data[2])
    seq = property(lambda self: self.data[3])

    @property
    def frames(self) -> list[tuple[int, int]]:
        return [(self.data[4 + 2 * i], self.data[5 + 2 * i]) for i in range(self.depth)]

    def to_array(self) -> array:
        return array("q", self.data)

    def __eq__(self, other) -> bool:
        return isinstance(other, PolicyState) and self.data == other.data

    def __hash__(self) -> int:
        return hash(self.data)

    def __repr__(self) -> str:
        return (f"PolicyState(color={self.color}, next={self.next_fresh}, depth={self.depth}, "
                f"seq={SEQ_NAMES[self.seq]})")


@dataclass(frozen=True)
class MicroPolicy:
    name: str
    flags: int
    reference: str | None = None  # correct policy this one deviates from

    @property
    def enforcing(self) -> bool:
        return self.flags != 0

    @property
    def family(self) -> str | None:
        if self.flags & K.F_DI:
            return "di"
        if self.flags & K.F_LTC:
            return "ltc"
        return None


def initial_tags(layout: Layout) -> list[int]:
    """Stack words Unused, callee-saved registers owned by color 0, PC colored 0."""
    tags = [NOTAG] * layout.size
    tags[0] = make_tag(PCCOLOR, 0)
    for r in CALLEE_SAVED:
        tags[REG_INDEX[r]] = make_tag(REGOWNED, 0)
    for i in layout.stack_indices():
        tags[i] = UNUSED
    return tags


def make_none() -> MicroPolicy:
    return MicroPolicy("none", 0)


def make_di() -> MicroPolicy:
    return MicroPolicy("di", K.F_DI)


def make_ltc() -> MicroPolicy:
    """Repaired LTC: every activation gets a fresh color."""
    return MicroPolicy("ltc", K.F_LTC)


def with_register_protection(p: MicroPolicy) -> MicroPolicy:
    if not p.enforcing:
        raise ConfigError("register protection needs an enforcing base policy")
    return MicroPolicy(p.name + "+regs", p.flags | K.F_REGS, p.reference)


MUTANTS: dict[str, tuple[int, str]] = {
    "LOAD_NO_CHECK_DI": (K.F_DI | K.F_REGS | K.F_LOAD_NO_CHECK, "di+regs"),
    "STORE_NO_CHECK": (K.F_DI | K.F_REGS | K.F_STORE_NO_CHECK, "di+regs"),
    "HEADER_NO_INIT": (K.F_DI | K.F_REGS | K.F_HEADER_NO_INIT, "di+regs"),
    "PER_DEPTH_TAG": (K.F_LTC | K.F_REGS | K.F_PER_DEPTH, "ltc+regs"),
    "LOAD_NO_CHECK_LT": (K.F_LTC | K.F_REGS | K.F_LOAD_NO_CHECK, "ltc+regs"),
    "STORE_NO_UPDATE": (K.F_LTC | K.F_REGS | K.F_STORE_NO_UPDATE, "ltc+regs"),
}


def make_mutant(mutant_id: str) -> MicroPolicy:
    try:
        flags, ref = MUTANTS[mutant_id]
    except KeyError:
        raise ConfigError(f"unknown mutant {mutant_id!r}") from None
    return MicroPolicy(f"mutant:{mutant_id}", flags, ref)


def parse_policy(selector: str) -> MicroPolicy:
    """``di``, ``ltc``, ``di+regs``, ``ltc+regs``, ``mutant:<ID>`` or ``none``."""
    sel = selector.strip()
    if sel.startswith("mutant:"):
        return make_mutant(sel[len("mutant:"):])
    base, _, ext = sel.partition("+")
    makers = {"di": make_di, "ltc": make_ltc, "none": make_none}
    if base not in makers or ext not in ("", "regs") or (base == "none" and ext):
        raise ConfigError(f"bad policy selector {selector!r}")
    p = makers[base]()
    return with_register_protection(p) if ext else p


def reference_policy(p: MicroPolicy) -> MicroPolicy:
    """The correct policy a mutant was derived from (DI+regs for ``none``)."""
    if p.reference:
        return parse_policy(p.reference)
    if not p.enforcing:
        return parse_policy("di+regs")
    return p


class StepResult(NamedTuple):
    state: MachineState
    ps: PolicyState
    event: int | None
    status: int  # kernel status: OK, FAILSTOP or HALTED

    @property
    def failstop(self) -> bool:
        return self.status == K.FAILSTOP


def guarded_step(m: MachineState, ps: PolicyState, policy: MicroPolicy,
                 code: CodeImage | Program) -> StepResult:
    """One monitored step. Failstop and halt both return the unchanged state
    with a silent event."""
    prog = code if isinstance(code, Program) else Program(code)
    vals, tags, psa = array("q", m.vals), array("q", m.tags), ps.to_array()
    st, ev = _core.kernel.step(vals, tags, psa, prog.arrays, prog.params, policy.flags)
    if st != K.OK:
        return StepResult(m, ps, None, st)
    return StepResult(MachineState(m.layout, vals, tags), PolicyState(psa),
                      ev if ev >= 0 else None, st)

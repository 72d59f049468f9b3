"""Events, fuel-bounded traces, depth-bounded runs and the on-return checkers.

A ``Runner`` bundles everything fixed for one test (program, annotations,
policy, semantics config) and drives the kernels. Two execution modes exist:

* ``run_full`` tracks the security context, stepping annotated instructions
  in Python and letting the kernel run the stretches between them;
* ``run_fast`` tracks only the call depth (via per-slot depth deltas) and
  runs entirely inside the kernel. Context is purely notional, so machine
  behavior and traces are identical in both modes.
"""
from __future__ import annotations

import enum
from array import array
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

from stacksafe import _core
from stacksafe import _pykernel as K
from stacksafe.machine import MachineState, Program
from stacksafe.policy import MicroPolicy, PolicyState
from stacksafe.secsem import (
    DEFAULT_CONFIG, CombinedState, ContextError, SecurityContext, SemConfig, fold_ops,
    make_program,
)

DEFAULT_FUEL = 4000


class Terminator(str, enum.Enum):
    RETURNED = "Returned"
    FUEL = "Fuel"
    HALTED = "Halted"


_TERM = {K.T_RETURNED: Terminator.RETURNED, K.T_FUEL: Terminator.FUEL, K.T_HALTED: Terminator.HALTED}


class Write(NamedTuple):
    payload: int


Silent = None  # the silent event


@dataclass(frozen=True)
class Trace:
    length: int
    writes: tuple  # ((step_index, payload), ...)
    terminator: Terminator
    final: Optional[CombinedState] = None  # set for Returned traces from run_to_return
    failstop: bool = False

    @property
    def outputs(self) -> tuple[int, ...]:
        return tuple(p for _, p in self.writes)

    @property
    def events(self) -> list:
        ev: list = [Silent] * self.length
        for i, p in self.writes:
            ev[i] = Write(p)
        return ev

    @classmethod
    def from_events(cls, events: Sequence, terminator=Terminator.RETURNED) -> "Trace":
        writes = tuple((i, e.payload) for i, e in enumerate(events) if e is not None)
        return cls(len(events), writes, Terminator(terminator))


def similar(t1: Trace, t2: Trace) -> bool:
    """Equality of non-silent events when both traces are complete in the same
    way (both returned or both halted); otherwise a possibly-infinite side only
    needs to be a prefix of the other."""
    o1, o2 = t1.outputs, t2.outputs
    if t1.terminator == t2.terminator and t1.terminator != Terminator.FUEL:
        return o1 == o2
    n = min(len(o1), len(o2))
    return o1[:n] == o2[:n]


def _outputs_similar(o1, term1, o2, term2) -> bool:
    if term1 == term2 and term1 != K.T_FUEL:
        return o1 == o2
    n = min(len(o1), len(o2))
    return o1[:n] == o2[:n]


class FlatState(NamedTuple):
    """Mutable-array snapshot used internally: vals, tags, policy state."""
    vals: array
    tags: array
    ps: array

    def copy(self) -> "FlatState":
        return FlatState(array("q", self.vals), array("q", self.tags), array("q", self.ps))

    @classmethod
    def of(cls, m: MachineState, ps: PolicyState) -> "FlatState":
        return cls(array("q", m.vals), array("q", m.tags), ps.to_array())

    def machine(self, layout) -> MachineState:
        return MachineState(layout, self.vals, self.tags)


class RunResult(NamedTuple):
    steps: int
    writes: list
    term: int
    ctx: Optional[SecurityContext]
    failstop: bool
    depth: int


class Runner:
    def __init__(self, code, annot: Mapping[int, list], policy: MicroPolicy,
                 config: SemConfig = DEFAULT_CONFIG, prog: Program | None = None):
        self.code = code
        self.layout = code.layout
        self.annot = annot
        self.policy = policy
        self.flags = policy.flags
        self.config = config
        self.prog = prog or make_program(code, annot)

    # -- fast path: kernel only
    def run_fast(self, st: FlatState, depth: int, d: int, fuel: int) -> RunResult:
        """Runs ``st`` in place; ``d <= 0`` never returns."""
        p = self.prog
        if d <= 0:
            d = -(1 << 62)
        steps, writes, term, depth, failed = _core.kernel.run(
            st.vals, st.tags, st.ps, p.arrays, p.params, self.flags, depth, d, fuel, False)
        return RunResult(steps, writes, term, None, failed, depth)

    # -- full path: context tracked
    def run_full(self, st: FlatState, ctx: SecurityContext, d: int, fuel: int,
                 on_op: Callable | None = None) -> RunResult:
        """Runs ``st`` in place until depth < d (d >= 1), fuel, halt or failstop.

        ``on_op(step_index, pre_vals, ops, st, ctx_after)`` is called after every
        annotated step.
        """
        p = self.prog
        kern = _core.kernel
        lists, params, flags = p.arrays, p.params, self.flags
        annot = self.annot
        layout = self.layout
        cfg = self.config
        writes: list = []
        steps = 0
        while steps < fuel:
            pc = st.vals[0]
            ops = annot.get(pc)
            if ops:
                pre = array("q", st.vals)
                status, ev = kern.step(st.vals, st.tags, st.ps, lists, params, flags)
                if status == K.HALTED:
                    return RunResult(steps, writes, K.T_HALTED, ctx, False, ctx.depth)
                if status == K.FAILSTOP:
                    return RunResult(fuel, writes, K.T_FUEL, ctx, True, ctx.depth)
                if ev >= 0:
                    writes.append((steps, ev))
                ctx = fold_ops(layout, pre, ctx, ops, cfg)
                if on_op is not None:
                    on_op(steps, pre, ops, st, ctx)
                steps += 1
                if ctx.depth < d:
                    return RunResult(steps, writes, K.T_RETURNED, ctx, False, ctx.depth)
                continue
            n, w, term, _, failed = kern.run(st.vals, st.tags, st.ps, lists, params, flags,
                                             0, 0, fuel - steps, True)
            for i, v in w:
                writes.append((steps + i, v))
            if failed:
                return RunResult(fuel, writes, K.T_FUEL, ctx, True, ctx.depth)
            steps += n
            if term == K.T_HALTED:
                return RunResult(steps, writes, K.T_HALTED, ctx, False, ctx.depth)
        return RunResult(steps, writes, K.T_FUEL, ctx, False, ctx.depth)

    def record(self, st: FlatState, ctx: SecurityContext, d: int, fuel: int):
        """Step-by-step run for diagnostics: ``[(step, pc, event, depth)]`` and
        the terminator."""
        rows = []
        kern = _core.kernel
        p = self.prog
        for step in range(fuel):
            pc = st.vals[0]
            ops = self.annot.get(pc, [])
            pre = array("q", st.vals)
            status, ev = kern.step(st.vals, st.tags, st.ps, p.arrays, p.params, self.flags)
            if status == K.HALTED:
                return rows, Terminator.HALTED
            if status == K.FAILSTOP:
                return rows, Terminator.FUEL
            if ops:
                ctx = fold_ops(self.layout, pre, ctx, ops, self.config)
            rows.append((step, pc, ev if ev >= 0 else None, ctx.depth))
            if ctx.depth < d:
                return rows, Terminator.RETURNED
        return rows, Terminator.FUEL


def format_trace_dump(rows, terminator: Terminator) -> str:
    lines = [f"{step:5d}  {pc:6d}  {'W(%d)' % ev if ev is not None else 'tau':>12}  {depth}"
             for step, pc, ev, depth in rows]
    lines.append(f"END {terminator.value}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- public API

def _runner(policy, prog_or_code, annot, config) -> Runner:
    return Runner(prog_or_code, annot, policy, config)


def run_to_return(s: CombinedState, d: int, policy: MicroPolicy, code, annot,
                  fuel: int = DEFAULT_FUEL, config: SemConfig = DEFAULT_CONFIG) -> Trace:
    """``d ↪ s``: run until the context depth drops below ``d``. With d = 0 the
    run never returns and stops at fuel or halt."""
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    r = _runner(policy, code, annot, config)
    st = FlatState.of(s.m, s.ps)
    res = r.run_full(st, s.ctx, d, fuel)
    final = None
    if res.term == K.T_RETURNED:
        final = CombinedState(st.machine(s.m.layout), PolicyState(st.ps), res.ctx)
    return Trace(res.steps, tuple(res.writes), _TERM[res.term], final, res.failstop)


class Verdict(str, enum.Enum):
    HOLDS = "Holds"
    VIOLATED = "Violated"
    VACUOUS = "Vacuous"


@dataclass(frozen=True)
class CheckResult:
    verdict: Verdict
    witness: object = None

    @property
    def holds(self) -> bool:
        return self.verdict != Verdict.VIOLATED


def on_return(s: CombinedState, d: int, P: Callable[[CombinedState], bool], policy, code, annot,
              fuel: int = DEFAULT_FUEL, config: SemConfig = DEFAULT_CONFIG) -> CheckResult:
    """``d ↑ P``: P at the first state below depth d; vacuous if never reached."""
    t = run_to_return(s, d, policy, code, annot, fuel, config)
    if t.terminator != Terminator.RETURNED:
        return CheckResult(Verdict.VACUOUS)
    if P(t.final):
        return CheckResult(Verdict.HOLDS, t.final)
    return CheckResult(Verdict.VIOLATED, t.final)


def on_return_pair(s1: CombinedState, s2: CombinedState, d: int,
                   R: Callable[[CombinedState, CombinedState], bool], policy, code, annot,
                   fuel: int = DEFAULT_FUEL, config: SemConfig = DEFAULT_CONFIG) -> CheckResult:
    """``d ⇑ R``: R on the two sides' own return states; vacuous unless both return."""
    t1 = run_to_return(s1, d, policy, code, annot, fuel, config)
    t2 = run_to_return(s2, d, policy, code, annot, fuel, config)
    if t1.terminator != Terminator.RETURNED or t2.terminator != Terminator.RETURNED:
        return CheckResult(Verdict.VACUOUS)
    if R(t1.final, t2.final):
        return CheckResult(Verdict.HOLDS, (t1.final, t2.final))
    return CheckResult(Verdict.VIOLATED, (t1.final, t2.final))

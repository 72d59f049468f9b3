"""Executable stack-safety properties over one annotated execution.

A single primary run records every call target (Call and TailCall) together
with the state at which that activation first drops below its depth. Checks
then spawn variant executions from those recorded states:

* wbcf  well-bracketed control flow (Call sites)
* clri  caller integrity (Call sites)
* clrc  caller confidentiality, with a trace clause and a return-time clause
* clec  callee confidentiality
* clei  callee integrity, with a trace clause and a return-time clause
"""
from __future__ import annotations

import enum
import itertools
from array import array
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from stacksafe import _pykernel as K
from stacksafe.machine import REG_INDEX, MachineError, MachineState
from stacksafe.policy import PolicyState
from stacksafe.secsem import (
    ACTIVE, PUBLIC, SEALED, Call, CombinedState, SecurityContext, TailCall,
)
from stacksafe.traces import DEFAULT_FUEL, FlatState, Runner, _outputs_similar

PROPS = ("wbcf", "clri", "clrc", "clec", "clei")
PROP_NAMES = {"wbcf": "WBCF", "clri": "ClrI", "clrc": "ClrC", "clec": "CleC", "clei": "CleI"}
FAMILIES = {"Integrity": ("clri", "clei"), "Confidentiality": ("clrc", "clec")}
_PROP_ID = {p: i for i, p in enumerate(PROPS)}
_UNVARIED = (0, REG_INDEX["zero"])


class Status(str, enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    VACUOUS = "VACUOUS"


@dataclass(frozen=True)
class Budget:
    n_variants: int = 5
    fuel: int = DEFAULT_FUEL
    exhaustive: bool = False  # enumerate all {0, 1}-valued variants instead of sampling
    domain: Optional[int] = None  # restrict sampled payloads to range(domain)
    max_exhaustive: int = 16

    def __post_init__(self):
        if self.n_variants < 1:
            raise ValueError("n_variants must be >= 1")
        if self.fuel <= 0:
            raise ValueError("fuel must be positive")


@dataclass
class CallSite:
    index: int
    step: int
    kind: str  # "call" or "tailcall"
    call_pc: int
    call_sp: int
    target: FlatState
    ctx: SecurityContext
    depth: int
    ret: Optional[FlatState] = None
    ret_step: Optional[int] = None
    trace_writes: tuple = ()
    trace_term: int = K.T_FUEL


@dataclass
class AnnotatedRun:
    runner: Runner
    initial: FlatState
    sites: list
    writes: list
    steps: int
    term: int
    failstop: bool
    ctx: SecurityContext


def execute(runner: Runner, m: MachineState, ps: PolicyState, ctx: SecurityContext,
            fuel: int = DEFAULT_FUEL) -> AnnotatedRun:
    """Primary run from the initial state, recording call sites."""
    st = FlatState.of(m, ps)
    initial = st.copy()
    sites: list[CallSite] = []
    open_sites: list[CallSite] = []
    sp_i = REG_INDEX["sp"]

    def on_op(step, pre, ops, cur, ctx_after):
        while open_sites and ctx_after.depth < open_sites[-1].depth:
            s = open_sites.pop()
            s.ret = cur.copy()
            s.ret_step = step
        for op in ops:
            t = type(op)
            if t is Call or t is TailCall:
                s = CallSite(len(sites), step, "call" if t is Call else "tailcall", pre[0], pre[sp_i],
                             cur.copy(), ctx_after, ctx_after.depth)
                sites.append(s)
                open_sites.append(s)

    res = runner.run_full(st, ctx, 0, fuel, on_op)
    for s in sites:
        if s.ret is not None:
            s.trace_writes = tuple((i - s.step - 1, v) for i, v in res.writes if s.step < i <= s.ret_step)
            s.trace_term = K.T_RETURNED
        elif res.term == K.T_FUEL and not res.failstop:
            # the activation had less than a full budget inside the primary run
            st2 = s.target.copy()
            r = runner.run_fast(st2, s.depth, s.depth, fuel)
            s.trace_writes = tuple(r.writes)
            s.trace_term = r.term
            if r.term == K.T_RETURNED:
                s.ret = st2
                s.ret_step = s.step + r.steps
        else:
            s.trace_writes = tuple((i - s.step - 1, v) for i, v in res.writes if i > s.step)
            s.trace_term = res.term
    return AnnotatedRun(runner, initial, sites, res.writes, res.steps, res.term, res.failstop, res.ctx)


# ------------------------------------------------------------- set helpers

def _diff_idx(a: Sequence[int], b: Sequence[int]) -> set[int]:
    return {i for i, (x, y) in enumerate(zip(a, b)) if x != y}


def corrupted_set(m: MachineState, m2: MachineState, n: MachineState, n2: MachineState) -> frozenset:
    """(Δ(m,m') ∪ Δ(n,n')) ∩ Δ(m',n')."""
    lay = m.layout
    if not (lay == m2.layout == n.layout == n2.layout):
        raise MachineError("states have different layouts")
    idx = _corrupted_idx(m.vals, m2.vals, n.vals, n2.vals)
    return frozenset(lay.element(i) for i in idx)


def _corrupted_idx(m, m2, n, n2) -> set[int]:
    return {i for i in range(len(m)) if (m[i] != m2[i] or n[i] != n2[i]) and m2[i] != n2[i]}


def _variable(idx: Iterable[int]) -> list[int]:
    return sorted(i for i in idx if i not in _UNVARIED)


# ------------------------------------------------------------- variants

def _sample_variant(vals: array, K_idx: Sequence[int], rng: np.random.Generator,
                    domain: Optional[int]) -> array:
    out = array("q", vals)
    if not K_idx:
        return out
    keep = rng.random(len(K_idx)) < 0.25
    if domain is None:
        draws = rng.integers(0, 0xFFFFFFFF, size=len(K_idx))  # shifted below to skip the old value
        for j, i in enumerate(K_idx):
            if not keep[j]:
                v = int(draws[j])
                out[i] = v + 1 if v >= vals[i] else v
    elif domain >= 2:
        draws = rng.integers(0, domain - 1, size=len(K_idx))
        for j, i in enumerate(K_idx):
            if not keep[j]:
                v = int(draws[j])
                old = vals[i] if 0 <= vals[i] < domain else domain
                out[i] = v + 1 if v >= old else v
    return out


def _variants(vals: array, K_idx: Sequence[int], budget: Budget, rng: np.random.Generator):
    if budget.exhaustive:
        if len(K_idx) > budget.max_exhaustive:
            raise ValueError(f"exhaustive mode over {len(K_idx)} elements")
        for combo in itertools.product((0, 1), repeat=len(K_idx)):
            out = array("q", vals)
            for i, v in zip(K_idx, combo):
                out[i] = v
            yield out
        return
    for _ in range(budget.n_variants):
        yield _sample_variant(vals, K_idx, rng, budget.domain)


# ------------------------------------------------------------- irrelevance

@dataclass
class IrrelevanceFailure:
    elements: tuple  # offending elements (each individually relevant when identifiable)
    varied: tuple
    original: tuple
    variant: tuple
    state: tuple = ()  # payloads of the offending variant


class _Checker:
    """Per-run evaluation context holding caches of original traces."""

    def __init__(self, run: AnnotatedRun, budget: Budget):
        self.run = run
        self.runner = run.runner
        self.budget = budget
        self._orig: dict[int, tuple] = {}

    def _trace0(self, st: FlatState):
        r = self.runner.run_fast(st.copy(), 0, 0, self.budget.fuel)
        return tuple(v for _, v in r.writes), r.term

    def orig_trace0(self, key: int, st: FlatState):
        if key not in self._orig:
            self._orig[key] = self._trace0(st)
        return self._orig[key]

    def irrelevant(self, key: int, st: FlatState, K_idx: Sequence[int],
                   rng: np.random.Generator) -> Optional[IrrelevanceFailure]:
        K_idx = _variable(K_idx)
        if not K_idx:
            return None
        o_out, o_term = self.orig_trace0(key, st)
        for vv in _variants(st.vals, K_idx, self.budget, rng):
            v_out, v_term = self._trace0(FlatState(vv, st.tags, st.ps))
            if not _outputs_similar(o_out, o_term, v_out, v_term):
                return IrrelevanceFailure(self._isolate(st, vv, K_idx, o_out, o_term),
                                          tuple(K_idx), o_out, v_out, tuple(vv))
        return None

    def _isolate(self, st, vv, K_idx, o_out, o_term) -> tuple:
        culprits = []
        for i in K_idx:
            if vv[i] == st.vals[i]:
                continue
            single = array("q", st.vals)
            single[i] = vv[i]
            out, term = self._trace0(FlatState(single, st.tags, st.ps))
            if not _outputs_similar(o_out, o_term, out, term):
                culprits.append(i)
        lay = self.runner.layout
        chosen = culprits or [i for i in K_idx if vv[i] != st.vals[i]]
        return tuple(lay.element(i) for i in chosen)


# ------------------------------------------------------------- verdicts

@dataclass
class SiteResult:
    status: Status
    detail: dict = field(default_factory=dict)


@dataclass
class PropVerdict:
    prop: str
    status: Status
    site: int  # failing site index, or number of sites checked
    seed: int
    sites_pass: int = 0
    sites_vacuous: int = 0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"PROP {self.prop} {self.status.value} site={self.site} seed={self.seed:#x}"


def site_rng(seed: int, site: int, prop: str, test_index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, test_index, site, _PROP_ID[prop]])


def _view_idx(ctx: SecurityContext, *classes: int) -> set:
    data = ctx.current.data
    return {i for i, c in enumerate(data) if c in classes}


def _check_wbcf(ck: _Checker, s: CallSite, rng) -> SiteResult:
    if s.ret is None:
        return SiteResult(Status.VACUOUS)
    pc, sp = s.ret.vals[0], s.ret.vals[REG_INDEX["sp"]]
    if pc == (s.call_pc + 4) & 0xFFFFFFFF and sp == s.call_sp:
        return SiteResult(Status.PASS)
    return SiteResult(Status.FAIL, {"expected_pc": s.call_pc + 4, "expected_sp": s.call_sp,
                                    "pc": pc, "sp": sp,
                                    "pc_offset": pc - s.call_pc - 4, "sp_offset": sp - s.call_sp})


def _irr_detail(bad: IrrelevanceFailure) -> dict:
    return {"elements": bad.elements, "varied": bad.varied, "original": bad.original,
            "variant": bad.variant, "start": "return", "state": bad.state}


def _check_clri(ck: _Checker, s: CallSite, rng) -> SiteResult:
    if s.ret is None:
        return SiteResult(Status.VACUOUS)
    Kset = _view_idx(s.ctx, SEALED) & _diff_idx(s.target.vals, s.ret.vals)
    bad = ck.irrelevant(s.index, s.ret, sorted(Kset), rng)
    if bad is None:
        return SiteResult(Status.PASS)
    return SiteResult(Status.FAIL, _irr_detail(bad))


def _check_clec(ck: _Checker, s: CallSite, rng) -> SiteResult:
    if s.ret is None:
        return SiteResult(Status.VACUOUS)
    Kset = _diff_idx(s.target.vals, s.ret.vals) - _view_idx(s.ctx, PUBLIC, ACTIVE)
    bad = ck.irrelevant(s.index, s.ret, sorted(Kset), rng)
    if bad is None:
        return SiteResult(Status.PASS)
    return SiteResult(Status.FAIL, _irr_detail(bad))


def _check_variants(ck: _Checker, s: CallSite, K_idx, rng, clauses) -> SiteResult:
    """Shared body of caller confidentiality and callee integrity."""
    K_idx = _variable(K_idx)
    runner, budget = ck.runner, ck.budget
    o_out = tuple(v for _, v in s.trace_writes)
    o_term = s.trace_term
    returned = s.ret is not None
    if not K_idx:
        return SiteResult(Status.PASS if returned else Status.VACUOUS)
    tv = s.target.vals
    d_m = _diff_idx(tv, s.ret.vals) if returned else None
    for vv in _variants(tv, K_idx, budget, rng):
        st = FlatState(array("q", vv), array("q", s.target.tags), array("q", s.target.ps))
        r = runner.run_fast(st, s.depth, s.depth, budget.fuel)
        v_out = tuple(v for _, v in r.writes)
        if not _outputs_similar(o_out, o_term, v_out, r.term):
            return SiteResult(Status.FAIL, {"clause": clauses[0], "original": o_out,
                                            "variant": v_out, "varied": tuple(K_idx),
                                            "start": "target", "state": tuple(vv)})
        if returned and r.term == K.T_RETURNED:
            nv = st.vals
            corr = {i for i in range(len(tv))
                    if (i in d_m or vv[i] != nv[i]) and s.ret.vals[i] != nv[i]}
            bad = ck.irrelevant(s.index, s.ret, sorted(corr), rng)
            if bad is not None:
                return SiteResult(Status.FAIL, {"clause": clauses[1], **_irr_detail(bad)})
    return SiteResult(Status.PASS if returned else Status.VACUOUS)


def _check_clrc(ck: _Checker, s: CallSite, rng) -> SiteResult:
    return _check_variants(ck, s, sorted(_view_idx(s.ctx, SEALED)), rng, ("trace", "return"))


def _check_clei(ck: _Checker, s: CallSite, rng) -> SiteResult:
    outside = set(range(len(s.ctx.current.data))) - _view_idx(s.ctx, PUBLIC, ACTIVE)
    return _check_variants(ck, s, sorted(outside), rng, ("trace", "return"))


_CHECKS = {"wbcf": _check_wbcf, "clri": _check_clri, "clrc": _check_clrc,
           "clec": _check_clec, "clei": _check_clei}
_CALL_ONLY = {"wbcf", "clri"}


def applicable_sites(run: AnnotatedRun, prop: str) -> list:
    if prop in _CALL_ONLY:
        return [s for s in run.sites if s.kind == "call"]
    return list(run.sites)


def check_property(run: AnnotatedRun, prop: str, budget: Budget = Budget(), seed: int = 0,
                   test_index: int = 0, stop_at_fail: bool = True) -> PropVerdict:
    ck = _Checker(run, budget)
    fn = _CHECKS[prop]
    n_pass = n_vac = 0
    for s in applicable_sites(run, prop):
        res = fn(ck, s, site_rng(seed, s.index, prop, test_index))
        if res.status == Status.FAIL:
            return PropVerdict(prop, Status.FAIL, s.index, seed, n_pass, n_vac, res.detail)
        if res.status == Status.PASS:
            n_pass += 1
        else:
            n_vac += 1
    status = Status.PASS if n_pass else Status.VACUOUS
    return PropVerdict(prop, status, n_pass + n_vac, seed, n_pass, n_vac)


def check_wbcf(run: AnnotatedRun, budget: Budget = Budget(), seed: int = 0) -> PropVerdict:
    return check_property(run, "wbcf", budget, seed)


def check_clr_integrity(run: AnnotatedRun, budget: Budget = Budget(), seed: int = 0) -> PropVerdict:
    return check_property(run, "clri", budget, seed)


def check_clr_confidentiality(run: AnnotatedRun, budget: Budget = Budget(), seed: int = 0) -> PropVerdict:
    return check_property(run, "clrc", budget, seed)


def check_cle_confidentiality(run: AnnotatedRun, budget: Budget = Budget(), seed: int = 0) -> PropVerdict:
    return check_property(run, "clec", budget, seed)


def check_cle_integrity(run: AnnotatedRun, budget: Budget = Budget(), seed: int = 0) -> PropVerdict:
    return check_property(run, "clei", budget, seed)


def check_all(run: AnnotatedRun, props: Iterable[str] = PROPS, budget: Budget = Budget(),
              seed: int = 0, test_index: int = 0) -> list:
    return [check_property(run, p, budget, seed, test_index) for p in props]


def irrelevant(s: CombinedState, K_set: Iterable, runner: Runner, budget: Budget = Budget(),
               rng: np.random.Generator | None = None) -> bool:
    """``(m, c) ∥ K`` by sampling (or exhaustive enumeration per ``budget``)."""
    lay = s.m.layout
    idx = [lay.index(k) for k in K_set]
    if any(i in _UNVARIED for i in idx):
        raise MachineError("PC and zero are never varied")
    dummy = AnnotatedRun(runner, FlatState.of(s.m, s.ps), [], [], 0, K.T_FUEL, False, s.ctx)
    ck = _Checker(dummy, budget)
    rng = rng if rng is not None else np.random.default_rng(0)
    return ck.irrelevant(-1, FlatState.of(s.m, s.ps), idx, rng) is None

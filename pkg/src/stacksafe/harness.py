"""Property campaigns, the mutation matrix and seed replay."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing as mp
import os
import time
from array import array
from dataclasses import dataclass, field
from typing import Iterable, Optional

from stacksafe import _core
from stacksafe import _pykernel as K
from stacksafe.generator import GenConfig, TestCase, generate, shrink
from stacksafe.machine import format_assembly
from stacksafe.policy import MUTANTS, parse_policy
from stacksafe.properties import (
    FAMILIES, PROP_NAMES, PROPS, Budget, PropVerdict, Status, check_property, execute,
)
from stacksafe.secsem import format_annotations
from stacksafe.traces import FlatState, Terminator, format_trace_dump

FORMAT_VERSION = 1

# (mutant, family) pairs with the largest acceptable mean tests-to-failure
MATRIX_ROWS: tuple = (
    ("LOAD_NO_CHECK_DI", "Confidentiality", 133),
    ("STORE_NO_CHECK", "Integrity", 260),
    ("HEADER_NO_INIT", "Integrity", 763),
    ("PER_DEPTH_TAG", "Integrity", 83425),
    ("LOAD_NO_CHECK_LT", "Integrity", 120),
    ("LOAD_NO_CHECK_LT", "Confidentiality", 6955),
    ("STORE_NO_UPDATE", "Integrity", 806),
    ("STORE_NO_UPDATE", "Confidentiality", 885),
)
CONTROLS = ("di+regs", "ltc+regs")


class IncompatibleReplay(ValueError):
    """A replay request whose recorded configuration does not match this build."""


@dataclass
class CampaignConfig:
    policy: str = "di+regs"
    props: tuple = PROPS
    gen: GenConfig = field(default_factory=GenConfig)
    tests: int = 100
    time_budget: Optional[float] = None  # seconds
    jobs: int = 1
    seed: int = 0
    n_variants: int = 5
    fuel: int = 4000
    mode: str = "soak"  # "soak" runs the whole budget, "mttf" stops at the first failure
    shrink: bool = True
    emit: Optional[str] = None
    dump_traces: Optional[str] = None

    def __post_init__(self):
        self.props = tuple(self.props)
        if not self.props:
            raise ValueError("select at least one property")
        bad = [p for p in self.props if p not in PROPS]
        if bad:
            raise ValueError(f"unknown properties {bad}")
        if self.tests <= 0 or (self.time_budget is not None and self.time_budget <= 0):
            raise ValueError("budgets must be positive")
        if self.mode not in ("soak", "mttf"):
            raise ValueError("mode must be soak or mttf")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        parse_policy(self.policy)

    @property
    def budget(self) -> Budget:
        return Budget(n_variants=self.n_variants, fuel=self.fuel)

    def fingerprint(self) -> str:
        """Hash of everything that determines generated tests and verdicts."""
        blob = json.dumps({"v": FORMAT_VERSION, "gen": dataclasses.asdict(self.gen),
                           "variants": self.n_variants, "fuel": self.fuel}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TestOutcome:
    index: int
    verdicts: list
    features: dict
    sites: int
    vacuous_sites: int
    seconds: float

    @property
    def failed(self) -> bool:
        return any(v.status == Status.FAIL for v in self.verdicts)


@dataclass
class CampaignReport:
    policy: str
    props: tuple
    seed: int
    fingerprint: str
    tests_run: int = 0
    counts: dict = field(default_factory=dict)  # prop -> {PASS, FAIL, VACUOUS}
    first_failure: Optional[int] = None  # test index
    first_failure_seconds: Optional[float] = None
    first_failure_lines: list = field(default_factory=list)
    failing_prop: Optional[str] = None
    shrunk_size: Optional[int] = None
    coverage: dict = field(default_factory=dict)  # feature -> number of tests containing it
    sites: int = 0
    vacuous_sites: int = 0
    seconds: float = 0.0

    @property
    def failed(self) -> bool:
        return self.first_failure is not None

    @property
    def vacuous_fraction(self) -> float:
        return self.vacuous_sites / self.sites if self.sites else 0.0

    @property
    def generator_flagged(self) -> bool:
        """More than half of the checked call sites were vacuous."""
        return self.vacuous_fraction > 0.5

    def table(self) -> str:
        rows = [f"policy {self.policy}  seed {self.seed}  tests {self.tests_run}  "
                f"time {self.seconds:.1f}s"]
        rows.append(f"{'property':<10}{'pass':>8}{'fail':>8}{'vacuous':>9}")
        for p in self.props:
            c = self.counts.get(p, {})
            rows.append(f"{PROP_NAMES[p]:<10}{c.get('PASS', 0):>8}{c.get('FAIL', 0):>8}"
                        f"{c.get('VACUOUS', 0):>9}")
        rows.append(f"vacuous call sites: {self.vacuous_sites}/{self.sites}"
                    + ("  (generator configuration flagged)" if self.generator_flagged else ""))
        if self.failed:
            rows.append(f"first failure: test {self.first_failure} ({PROP_NAMES[self.failing_prop]}) "
                        f"after {self.first_failure_seconds:.2f}s")
            if self.shrunk_size is not None:
                rows.append(f"shrunk to {self.shrunk_size} instructions")
        return "\n".join(rows)

    def lines(self) -> list[str]:
        return list(self.first_failure_lines)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["props"] = list(self.props)
        return d


# ------------------------------------------------------------------ one test

def make_test(cfg: CampaignConfig, index: int) -> TestCase:
    return generate(cfg.gen, cfg.policy, seed=(cfg.seed, index))


def evaluate(tc: TestCase, cfg: CampaignConfig, index: int, policy: str | None = None,
             stop_at_fail: bool = True):
    pol = parse_policy(policy or cfg.policy)
    runner = tc.runner(pol)
    run = execute(runner, tc.init, tc.ps, tc.initial_context(), cfg.fuel)
    verdicts = []
    for p in cfg.props:
        v = check_property(run, p, cfg.budget, cfg.seed, index)
        verdicts.append(v)
        if stop_at_fail and v.status == Status.FAIL and cfg.mode == "mttf":
            break
    return run, verdicts


def run_one(cfg: CampaignConfig, index: int) -> TestOutcome:
    t = time.perf_counter()
    tc = make_test(cfg, index)
    run, verdicts = evaluate(tc, cfg, index)
    vac = sum(1 for s in run.sites if s.ret is None)
    return TestOutcome(index, verdicts, tc.features(), len(run.sites), vac, time.perf_counter() - t)


def _worker(args):
    cfg, index = args
    return run_one(cfg, index)


def _outcomes(cfg: CampaignConfig) -> Iterable[TestOutcome]:
    if cfg.jobs == 1:
        for i in range(cfg.tests):
            yield run_one(cfg, i)
        return
    ctx = mp.get_context("fork" if hasattr(os, "fork") else "spawn")
    with ctx.Pool(cfg.jobs) as pool:
        yield from pool.imap(_worker, ((cfg, i) for i in range(cfg.tests)), chunksize=8)


def run_campaign(cfg: CampaignConfig) -> CampaignReport:
    """Generate, execute and check ``cfg.tests`` cases (or until the first
    failure in mttf mode). Outcomes are consumed in index order, so the first
    failure is the smallest failing index at any parallelism."""
    rep = CampaignReport(cfg.policy, cfg.props, cfg.seed, cfg.fingerprint())
    rep.counts = {p: {"PASS": 0, "FAIL": 0, "VACUOUS": 0} for p in cfg.props}
    rep.coverage = {"calls": 0, "tailcalls": 0, "stack_args": 0, "public_allocs": 0}
    start = time.perf_counter()
    for out in _outcomes(cfg):
        rep.tests_run += 1
        rep.sites += out.sites
        rep.vacuous_sites += out.vacuous_sites
        for k, v in out.features.items():
            rep.coverage[k] += v > 0
        for v in out.verdicts:
            rep.counts[v.prop][v.status.value] += 1
        if out.failed and rep.first_failure is None:
            rep.first_failure = out.index
            rep.first_failure_seconds = time.perf_counter() - start
            rep.first_failure_lines = [v.line() for v in out.verdicts]
            rep.failing_prop = next(v.prop for v in out.verdicts if v.status == Status.FAIL)
            if cfg.mode == "mttf":
                break
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            break
    rep.seconds = time.perf_counter() - start
    if rep.failed:
        tc = make_test(cfg, rep.first_failure)
        if cfg.shrink:
            small = shrink_failure(tc, cfg, rep.first_failure, rep.failing_prop)
            rep.shrunk_size = small.size
            tc = small
        if cfg.emit:
            emit(tc, cfg.emit, f"fail_{cfg.seed}_{rep.first_failure}")
        if cfg.dump_traces:
            dump_traces(make_test(cfg, rep.first_failure), cfg, rep.first_failure,
                        rep.failing_prop, cfg.dump_traces)
    return rep


def shrink_failure(tc: TestCase, cfg: CampaignConfig, index: int, prop: str) -> TestCase:
    one = dataclasses.replace(cfg, props=(prop,))

    def fails(c: TestCase) -> bool:
        _, vs = evaluate(c, one, index)
        return vs[0].status == Status.FAIL

    return shrink(tc, fails)


# ------------------------------------------------------------------ matrix

@dataclass
class MatrixRow:
    policy: str
    family: str
    bound: Optional[int]
    tests: list  # tests-to-failure per root seed (None = survived)
    seconds: list

    @property
    def killed(self) -> bool:
        return all(t is not None for t in self.tests)

    @property
    def mean_tests(self) -> Optional[float]:
        if not self.killed:
            return None
        return sum(self.tests) / len(self.tests)

    @property
    def ok(self) -> bool:
        if self.bound is None:  # negative control: must survive
            return not any(t is not None for t in self.tests)
        return self.killed and self.mean_tests <= self.bound


@dataclass
class MatrixReport:
    rows: list

    @property
    def survivors(self) -> list:
        return [r for r in self.rows if r.bound is not None and not r.killed]

    @property
    def control_failures(self) -> list:
        return [r for r in self.rows if r.bound is None and not r.ok]

    def table(self) -> str:
        out = [f"{'policy':<28}{'property':<17}{'tests':>10}{'bound':>8}{'MTTF (s)':>10}  status"]
        for r in self.rows:
            mean = f"{r.mean_tests:.1f}" if r.mean_tests is not None else "-"
            secs = [s for s in r.seconds if s is not None]
            mttf = f"{sum(secs) / len(secs):.2f}" if secs and r.bound is not None else "-"
            if r.bound is None:
                status = "survived (control)" if r.ok else "FAILED (control)"
            else:
                status = ("killed" if r.ok else "killed late") if r.killed else "SURVIVED"
            out.append(f"{r.policy:<28}{r.family:<17}{mean:>10}{r.bound or '-':>8}{mttf:>10}  {status}")
        return "\n".join(out)


def run_mutation_matrix(budget: int = 5000, roots: int = 5, seed: int = 0, jobs: int = 1,
                        control_tests: int = 200, gen: GenConfig = GenConfig(),
                        rows: Iterable = MATRIX_ROWS) -> MatrixReport:
    """Tests-to-failure for every (mutant, property family) row, averaged over
    ``roots`` root seeds, plus both correct policies as negative controls."""
    out = []
    for mutant, family, bound in rows:
        tests, secs = [], []
        for r in range(roots):
            cfg = CampaignConfig(policy=f"mutant:{mutant}", props=FAMILIES[family], gen=gen,
                                 tests=budget, jobs=jobs, seed=seed + r, mode="mttf", shrink=False)
            rep = run_campaign(cfg)
            tests.append(rep.first_failure + 1 if rep.failed else None)
            secs.append(rep.first_failure_seconds)
        out.append(MatrixRow(f"mutant:{mutant}", family, bound, tests, secs))
    for pol in CONTROLS:
        cfg = CampaignConfig(policy=pol, gen=gen, tests=control_tests, jobs=jobs, seed=seed,
                             shrink=False)
        rep = run_campaign(cfg)
        out.append(MatrixRow(pol, "all", None, [rep.first_failure], [rep.first_failure_seconds]))
    return MatrixReport(out)


# ------------------------------------------------------------------ replay and dumps

def replay(seed: int, index: int, cfg: CampaignConfig, fingerprint: str | None = None):
    """Regenerate test ``index`` of root ``seed`` and recompute its verdicts."""
    cfg = dataclasses.replace(cfg, seed=seed)
    if fingerprint is not None and fingerprint != cfg.fingerprint():
        raise IncompatibleReplay(f"report fingerprint {fingerprint} does not match "
                                 f"this configuration ({cfg.fingerprint()})")
    tc = make_test(cfg, index)
    _, verdicts = evaluate(tc, dataclasses.replace(cfg, mode="soak"), index)
    if cfg.dump_traces:
        for v in verdicts:
            if v.status == Status.FAIL:
                dump_traces(tc, cfg, index, v.prop, cfg.dump_traces)
    return tc, verdicts


def trace_rows(tc: TestCase, policy: str, st: FlatState, depth: int, d: int, fuel: int):
    """Single-step ``st`` with the kernel, tracking depth through the
    annotation-derived deltas; rows are ``(step, pc, event, depth)``."""
    r = tc.runner(policy)
    p = r.prog
    lay = tc.layout
    dd = p.arrays[6]
    rows = []
    for step in range(fuel):
        pc = st.vals[0]
        status, ev = _core.kernel.step(st.vals, st.tags, st.ps, p.arrays, p.params, r.flags)
        if status == K.HALTED:
            return rows, Terminator.HALTED
        if status == K.FAILSTOP:
            return rows, Terminator.FUEL
        if lay.in_code(pc):
            depth += dd[(pc - lay.code_base) // 4]
        rows.append((step, pc, ev if ev >= 0 else None, depth))
        if d > 0 and depth < d:
            return rows, Terminator.RETURNED
    return rows, Terminator.FUEL


def dump_traces(tc: TestCase, cfg: CampaignConfig, index: int, prop: str, outdir: str) -> list[str]:
    """Write the original/variant trace pair behind a failing verdict."""
    os.makedirs(outdir, exist_ok=True)
    run = execute(tc.runner(cfg.policy), tc.init, tc.ps, tc.initial_context(), cfg.fuel)
    v = check_property(run, prop, cfg.budget, cfg.seed, index)
    paths = []
    if v.status != Status.FAIL:
        return paths
    site = run.sites[v.site]
    det = v.detail
    if "state" not in det:  # control-flow failure: only the original trace
        st = site.target.copy()
        rows, term = trace_rows(tc, cfg.policy, st, site.depth, site.depth, cfg.fuel)
        path = os.path.join(outdir, f"{prop}_{cfg.seed}_{index}_original.trace")
        with open(path, "w") as f:
            f.write(format_trace_dump(rows, term))
        return [path]
    base = site.target if det["start"] == "target" else site.ret
    depth = site.depth if det["start"] == "target" else site.depth - 1
    d = site.depth if det["start"] == "target" else 0
    sides = {"original": base.copy(),
             "variant": FlatState(array("q", det["state"]), array("q", base.tags), array("q", base.ps))}
    for name, st in sides.items():
        rows, term = trace_rows(tc, cfg.policy, st, depth, d, cfg.fuel)
        path = os.path.join(outdir, f"{prop}_{cfg.seed}_{index}_{name}.trace")
        with open(path, "w") as f:
            f.write(format_trace_dump(rows, term))
        paths.append(path)
    return paths


def emit(tc: TestCase, outdir: str, stem: str) -> tuple[str, str]:
    os.makedirs(outdir, exist_ok=True)
    asm = os.path.join(outdir, stem + ".asm")
    ann = os.path.join(outdir, stem + ".ann")
    with open(asm, "w") as f:
        f.write(format_assembly(tc.to_asm()))
    with open(ann, "w") as f:
        f.write(format_annotations(tc.annot))
    return asm, ann


# ------------------------------------------------------------------ config files

def load_config(path: str) -> dict:
    """JSON object whose keys mirror the command-line flags."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def gen_config(overrides: dict | None = None) -> GenConfig:
    fields = {f.name for f in dataclasses.fields(GenConfig)}
    overrides = dict(overrides or {})
    unknown = set(overrides) - fields
    if unknown:
        raise ValueError(f"unknown generator settings {sorted(unknown)}")
    for k in ("main_len", "body_len"):
        if k in overrides:
            overrides[k] = tuple(overrides[k])
    return GenConfig(**overrides)

"""Compare the compiled and interpreted step kernels on generated tests.

    python benchmarks/bench_kernel.py [--tests N] [--policy P]

Reports machine steps per second for a raw kernel run and wall time for a
full property evaluation, for each backend.
"""
from __future__ import annotations

import argparse
import time

from stacksafe import _core
from stacksafe.generator import GenConfig, generate
from stacksafe.properties import Budget, check_all, execute
from stacksafe.traces import FlatState


def _kernel_rate(cases, reps: int) -> float:
    prepared = [(tc.runner(), FlatState.of(tc.init, tc.ps)) for tc in cases]
    steps = 0
    t0 = time.perf_counter()
    for _ in range(reps):
        for r, st in prepared:
            res = r.run_fast(st.copy(), 0, 0, 4000)
            if res.failstop:
                raise RuntimeError("benchmark case failstopped")
            steps += res.steps
    return steps / (time.perf_counter() - t0)


def _property_time(cases) -> float:
    t0 = time.perf_counter()
    for i, tc in enumerate(cases):
        run = execute(tc.runner(), tc.init, tc.ps, tc.initial_context())
        check_all(run, budget=Budget(), seed=0, test_index=i)
    return time.perf_counter() - t0


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tests", type=int, default=100)
    ap.add_argument("--policy", default="di+regs")
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args(argv)

    # misbehavior-free tests so runs end at HALT rather than at a failstop
    cases = [generate(GenConfig(seed=i, p_misbehave=0.0), args.policy) for i in range(args.tests)]
    backends = ["python"] + (["compiled"] if _core.ckernel is not None else [])
    rows = {}
    for b in backends:
        _core.use(b)
        reps = args.reps if b == "compiled" else 1
        rows[b] = (_kernel_rate(cases, reps), _property_time(cases))
    print(f"{'backend':<10}{'steps/s':>14}{'props (s)':>12}")
    for b, (rate, secs) in rows.items():
        print(f"{b:<10}{rate:>14,.0f}{secs:>12.2f}")
    if len(rows) == 2:
        (pr, pt), (cr, ct) = rows["python"], rows["compiled"]
        print(f"speedup   {cr / pr:>13.1f}x{pt / ct:>11.1f}x")


if __name__ == "__main__":
    main()

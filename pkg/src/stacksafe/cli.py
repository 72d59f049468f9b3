"""``stacksafe`` command line: run | matrix | replay."""
from __future__ import annotations

import argparse
import json
import sys

from stacksafe import _core
from stacksafe.harness import (
    CampaignConfig, IncompatibleReplay, gen_config, load_config, replay, run_campaign,
    run_mutation_matrix,
)
from stacksafe.properties import PROPS, Status

EXIT_OK, EXIT_ERROR, EXIT_FAIL, EXIT_SURVIVED = 0, 1, 3, 4


def _props(text: str) -> tuple:
    props = tuple(p.strip().lower() for p in text.split(",") if p.strip())
    bad = [p for p in props if p not in PROPS]
    if bad or not props:
        raise argparse.ArgumentTypeError(f"properties must be drawn from {','.join(PROPS)}")
    return props


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring these flags (flags win)")
    p.add_argument("--policy", help="di, ltc, di+regs, ltc+regs, none or mutant:<ID>")
    p.add_argument("--props", type=_props, help="comma-separated subset of " + ",".join(PROPS))
    p.add_argument("--seed", type=lambda s: int(s, 0), help="root seed")
    p.add_argument("--fuel", type=int)
    p.add_argument("--variants", type=int, help="sampled variants per check")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--dump-traces", metavar="DIR", help="write trace pairs for failures")
    p.add_argument("--backend", choices=("compiled", "python"), help="step kernel to use")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stacksafe", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="property campaign against one policy")
    _common(run)
    run.add_argument("--tests", type=int)
    run.add_argument("--time-budget", type=float, metavar="SECONDS")
    run.add_argument("--mode", choices=("soak", "mttf"))
    run.add_argument("--emit", metavar="DIR", help="write the first failing test as .asm/.ann")
    run.add_argument("--no-shrink", action="store_true")
    run.add_argument("--report", metavar="FILE", help="write the JSON report here")
    mx = sub.add_parser("matrix", help="mutation matrix with negative controls")
    _common(mx)
    mx.add_argument("--budget", type=int, help="tests per mutant campaign")
    mx.add_argument("--roots", type=int, help="root seeds averaged per row")
    mx.add_argument("--control-tests", type=int)
    rp = sub.add_parser("replay", help="regenerate one test and recompute its verdicts")
    _common(rp)
    rp.add_argument("--index", type=int, help="test index within the root seed")
    rp.add_argument("--fingerprint", help="configuration fingerprint from a report")
    return ap


_FLAG_KEYS = ("policy", "props", "seed", "fuel", "variants", "jobs", "dump_traces", "tests",
              "time_budget", "mode", "emit", "budget", "roots", "control_tests", "index",
              "fingerprint", "report", "backend")


def _settings(args) -> dict:
    merged = load_config(args.config) if args.config else {}
    if "props" in merged and isinstance(merged["props"], str):
        merged["props"] = _props(merged["props"])
    for k in _FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    if getattr(args, "no_shrink", False):
        merged["shrink"] = False
    return merged


def _campaign(s: dict) -> CampaignConfig:
    return CampaignConfig(
        policy=s.get("policy", "di+regs"), props=tuple(s.get("props", PROPS)),
        gen=gen_config(s.get("gen")), tests=s.get("tests", 100), time_budget=s.get("time_budget"),
        jobs=s.get("jobs", 1), seed=s.get("seed", 0), n_variants=s.get("variants", 5),
        fuel=s.get("fuel", 4000), mode=s.get("mode", "soak"), shrink=s.get("shrink", True),
        emit=s.get("emit"), dump_traces=s.get("dump_traces"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        s = _settings(args)
        if s.get("backend"):
            _core.use(s["backend"])
        if args.cmd == "run":
            cfg = _campaign(s)
            rep = run_campaign(cfg)
            print(rep.table())
            for line in rep.lines():
                print(line)
            if s.get("report"):
                with open(s["report"], "w") as f:
                    json.dump(rep.to_json(), f, indent=2)
            return EXIT_FAIL if rep.failed else EXIT_OK
        if args.cmd == "matrix":
            rep = run_mutation_matrix(budget=s.get("budget", 5000), roots=s.get("roots", 5),
                                      seed=s.get("seed", 0), jobs=s.get("jobs", 1),
                                      control_tests=s.get("control_tests", 200),
                                      gen=gen_config(s.get("gen")))
            print(rep.table())
            if rep.survivors:
                return EXIT_SURVIVED
            return EXIT_FAIL if rep.control_failures else EXIT_OK
        cfg = _campaign(s)
        tc, verdicts = replay(cfg.seed, s.get("index", 0), cfg, s.get("fingerprint"))
        for v in verdicts:
            print(v.line())
        return EXIT_FAIL if any(v.status == Status.FAIL for v in verdicts) else EXIT_OK
    except IncompatibleReplay as e:
        print(f"stacksafe: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as e:
        print(f"stacksafe: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

import json

import pytest

from stacksafe import cli
from stacksafe.harness import (
    CampaignConfig, IncompatibleReplay, MATRIX_ROWS, gen_config, make_test, replay,
    run_campaign, run_mutation_matrix,
)
from stacksafe.properties import Status

def test_store_no_check_killed_by_integrity():
    cfg = CampaignConfig(policy="mutant:STORE_NO_CHECK", props=("clri", "clei"), tests=300,
                         mode="mttf", shrink=False)
    rep = run_campaign(cfg)
    assert rep.failed and rep.failing_prop in ("clri", "clei")
    assert rep.first_failure < 300


def test_report_fields_and_json():
    rep = run_campaign(CampaignConfig(policy="di+regs", tests=20))
    assert rep.tests_run == 20 and not rep.failed
    assert sum(rep.counts["wbcf"].values()) == 20
    assert 0.0 <= rep.vacuous_fraction <= 1.0
    js = json.loads(json.dumps(rep.to_json()))
    assert js["fingerprint"] == CampaignConfig().fingerprint()
    assert "vacuous call sites" in rep.table()


def test_parallel_matches_serial():
    kw = dict(policy="mutant:LOAD_NO_CHECK_LT", props=("clri", "clei"), tests=60, seed=4,
              shrink=False)
    a = run_campaign(CampaignConfig(**kw))
    b = run_campaign(CampaignConfig(jobs=2, **kw))
    assert (a.first_failure, a.counts, a.coverage) == (b.first_failure, b.counts, b.coverage)


def test_mttf_mode_stops_at_first_failure():
    cfg = CampaignConfig(policy="mutant:LOAD_NO_CHECK_LT", props=("clri", "clei"),
                         tests=500, mode="mttf", shrink=True)
    rep = run_campaign(cfg)
    assert rep.tests_run == rep.first_failure + 1
    assert rep.shrunk_size is not None
    assert rep.shrunk_size <= make_test(cfg, rep.first_failure).size


def test_replay_reproduces_failure():
    cfg = CampaignConfig(policy="mutant:LOAD_NO_CHECK_LT", props=("clri", "clei"), tests=200,
                         mode="mttf", shrink=False, seed=2)
    rep = run_campaign(cfg)
    tc1, v1 = replay(2, rep.first_failure, cfg, cfg.fingerprint())
    tc2, v2 = replay(2, rep.first_failure, cfg)
    assert any(v.status == Status.FAIL for v in v1)
    assert [v.line() for v in v1] == [v.line() for v in v2]
    assert tc1.code.instrs == tc2.code.instrs


def test_replay_fingerprint_mismatch():
    with pytest.raises(IncompatibleReplay):
        replay(0, 0, CampaignConfig(), "0000000000000000")


def test_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig(props=())
    with pytest.raises(ValueError):
        CampaignConfig(tests=0)
    with pytest.raises(ValueError):
        CampaignConfig(policy="bogus")
    with pytest.raises(ValueError):
        gen_config({"p_nonsense": 1})
    assert gen_config({"main_len": [5, 6]}).main_len == (5, 6)


def test_budget_one_leaves_survivors():
    rep = run_mutation_matrix(budget=1, roots=1, control_tests=2)
    assert len(rep.survivors) >= len(MATRIX_ROWS) // 2
    assert not rep.control_failures
    assert "SURVIVED" in rep.table()


# ------------------------------------------------------------ command line

def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--policy", "di+regs", "--tests", "10"]) == cli.EXIT_OK
    code = cli.main(["run", "--policy", "mutant:STORE_NO_CHECK", "--props", "clri,clei",
                     "--tests", "300", "--mode", "mttf", "--no-shrink"])
    assert code == cli.EXIT_FAIL
    assert "PROP clri" in capsys.readouterr().out
    assert cli.main(["run", "--policy", "nonsense", "--tests", "1"]) == cli.EXIT_ERROR
    assert cli.main(["matrix", "--budget", "1", "--roots", "1", "--control-tests", "1"]) == cli.EXIT_SURVIVED


def test_cli_bad_props_rejected():
    with pytest.raises(SystemExit):
        cli.main(["run", "--props", "wbcf,bogus"])


def test_cli_config_file_and_override(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"policy": "mutant:STORE_NO_CHECK", "props": "clri,clei",
                                "tests": 300, "mode": "mttf", "shrink": False,
                                "gen": {"max_functions": 8}}))
    report = tmp_path / "r.json"
    assert cli.main(["run", "--config", str(conf), "--report", str(report)]) == cli.EXIT_FAIL
    data = json.loads(report.read_text())
    assert data["policy"] == "mutant:STORE_NO_CHECK" and data["first_failure"] is not None
    assert cli.main(["run", "--config", str(conf), "--policy", "di+regs", "--tests", "5"]) == cli.EXIT_OK


def test_cli_missing_config_is_error(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_ERROR


def test_cli_replay_and_dumps(tmp_path, capsys):
    cfg = CampaignConfig(policy="mutant:LOAD_NO_CHECK_DI", props=("clrc", "clec"), tests=200,
                         mode="mttf", shrink=False)
    rep = run_campaign(cfg)
    assert rep.failed
    capsys.readouterr()
    args = ["replay", "--policy", cfg.policy, "--props", "clrc,clec", "--seed", "0",
            "--index", str(rep.first_failure), "--dump-traces", str(tmp_path)]
    assert cli.main(args + ["--fingerprint", cfg.fingerprint()]) == cli.EXIT_FAIL
    out = capsys.readouterr().out
    assert "FAIL" in out
    dumps = sorted(p.name for p in tmp_path.iterdir())
    assert any(n.endswith("_original.trace") for n in dumps)
    assert any(n.endswith("_variant.trace") for n in dumps)
    text = next(tmp_path.glob("*_original.trace")).read_text()
    assert text.splitlines()[-1].startswith("END ")
    assert cli.main(args + ["--fingerprint", "deadbeef"]) == cli.EXIT_ERROR


def test_cli_emit(tmp_path):
    code = cli.main(["run", "--policy", "mutant:STORE_NO_CHECK", "--props", "clri,clei",
                     "--tests", "300", "--mode", "mttf", "--emit", str(tmp_path)])
    assert code == cli.EXIT_FAIL
    names = {p.suffix for p in tmp_path.iterdir()}
    assert names == {".asm", ".ann"}


def test_cli_python_backend():
    from stacksafe import _core
    before = _core.BACKEND
    try:
        assert cli.main(["run", "--policy", "ltc+regs", "--tests", "3", "--backend", "python"]) == 0
    finally:
        _core.use(before)

import json
from dataclasses import replace

import pytest

from bftlab import cli, harness
from bftlab.design_space import dumps, get_template

QUICK = {"protocol": "PBFT", "duration": 1_500_000, "warmup": 500_000,
         "cooldown": 500_000, "clients": 4}


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_query_contains_hotstuff(capsys):
    code, out, _ = run(capsys, "query", "strategy=pessimistic", "topology=star",
                       "replicas=3f+1", "--named")
    assert code == 0
    assert "HotStuff" in out


def test_query_two_phase_pessimistic_is_empty(capsys):
    code, out, _ = run(capsys, "query", "strategy=pessimistic", "phases=2", "replicas=3f+1")
    assert code == 0
    assert out.strip() == "# 0 point(s)"


def test_query_bad_value_is_a_validation_error(capsys):
    code, _, err = run(capsys, "query", "topology=ring")
    assert code == 1 and "ring" in err


def test_derive(capsys):
    code, out, _ = run(capsys, "derive", "PBFT", "DC1", "DC3")
    assert code == 0
    assert out.splitlines()[-1].startswith("HotStuff")
    code, _, err = run(capsys, "derive", "PBFT", "DC99")
    assert code == 1


def test_validate(tmp_path, capsys):
    good = tmp_path / "pbft.txt"
    good.write_text(dumps(get_template("PBFT")))
    code, out, _ = run(capsys, "validate", str(good))
    assert (code, out.strip()) == (0, "valid: PBFT")
    bad = tmp_path / "bad.txt"
    bad.write_text("topology = ring\n")
    assert run(capsys, "validate", str(bad))[0] == 1


def test_validate_rejects_rule_violations(tmp_path, capsys):
    d = replace(get_template("PBFT"), name=None, phases=2)
    path = tmp_path / "two.txt"
    path.write_text(dumps(d))
    code, out, _ = run(capsys, "validate", str(path))
    assert code == 1 and out.startswith("invalid")


def test_run_and_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(QUICK))
    out_path = tmp_path / "rep.json"
    code, _, _ = run(capsys, "run", str(cfg), "--seed", "4", "-o", str(out_path))
    assert code == 0
    rep = json.loads(out_path.read_text())
    assert rep["seed"] == 4 and rep["audit"]["violations"] == 0
    code, out, _ = run(capsys, "report", str(out_path))
    assert code == 0 and "PBFT" in out
    # byte-identical on rerun
    again = tmp_path / "again.json"
    run(capsys, "run", str(cfg), "--seed", "4", "-o", str(again))
    assert again.read_bytes() == out_path.read_bytes()


def test_run_sweep_gives_one_report_per_point(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**QUICK, "sweep": {"engine.batch_size": [10, 20]}}))
    code, out, _ = run(capsys, "run", str(cfg), "--format", "human")
    assert code == 0
    assert len(out.strip().splitlines()) == 4


def test_config_errors_exit_1(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"protocol": "PBFT", "f": 1, "n": 5}))
    code, _, err = run(capsys, "run", str(cfg))
    assert code == 1 and "n = 5" in err
    assert run(capsys, "run", str(tmp_path / "missing.json"))[0] == 1


def test_invariant_violation_exits_2(tmp_path, capsys, monkeypatch):
    def broken(self):
        self.violations.append("agreement: forced")
    monkeypatch.setattr(harness.Recorder, "cross_check", broken)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(QUICK))
    code, _, err = run(capsys, "run", str(cfg))
    assert code == 2 and "forced" in err


def test_internal_fault_exits_3(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("boom")
    monkeypatch.setattr(cli, "run_experiment", boom)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(QUICK))
    assert run(capsys, "run", str(cfg))[0] == 3


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["run", "--help"])
    out = capsys.readouterr().out
    for key in ("protocol", "faults", "sweep", "batch_size", "tau1", "stretch", "verify"):
        assert key in out

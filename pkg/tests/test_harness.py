import json

import pytest

from bftlab import harness
from bftlab.harness import (ConfigError, InvariantViolation, emit_report, parse_config,
                            run_experiment, run_once, saturate, sweep_points)

QUICK = {"duration": 1_500_000, "warmup": 500_000, "cooldown": 500_000, "clients": 4}


def test_n_is_derived_from_the_formula():
    assert parse_config({"protocol": "PBFT", "f": 5}).n == 16
    assert parse_config({"protocol": "FLB", "f": 3}).n == 14
    assert parse_config({"protocol": "FTB", "f": 3}).n == 14
    assert parse_config({"protocol": "Zyzzyva5", "f": 1}).n == 6


def test_inconsistent_n_is_rejected():
    with pytest.raises(ConfigError, match="3f\\+1"):
        parse_config({"protocol": "PBFT", "f": 1, "n": 5})


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({"protocol": "PBFT", "bogus": 1})
    with pytest.raises(ConfigError, match="engine"):
        parse_config({"protocol": "PBFT", "engine": {"nope": 3}})


def test_unknown_protocol_lists_known_names():
    with pytest.raises(ConfigError) as exc:
        parse_config({"protocol": "Raft"})
    assert "PBFT" in str(exc.value) and "HotStuff" in str(exc.value)


@pytest.mark.parametrize("doc", [
    {"warmup": 5_000_000, "cooldown": 5_000_000, "duration": 10_000_000},
    {"f": 0},
    {"clients": 0},
    {"preset": "mars"},
    {"faults": [{"node": 0, "crash_at": 0}, {"node": 1, "crash_at": 0}]},
    {"faults": [{"node": 9, "crash_at": 0}]},
    {"sweep": {"protocol": ["PBFT"]}},
])
def test_bad_documents(doc):
    with pytest.raises(ConfigError):
        parse_config({"protocol": "PBFT", **doc})


def test_json_text_is_accepted():
    cfg = parse_config('{"protocol": "HotStuff", "f": 2}')
    assert (cfg.protocol, cfg.n) == ("HotStuff", 7)
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_report_round_trips_through_structured_output():
    rep = run_once(parse_config({"protocol": "PBFT", **QUICK}))
    assert json.loads(emit_report(rep)) == rep
    assert "PBFT" in emit_report(rep, "human")


def test_report_contents():
    rep = run_once(parse_config({"protocol": "PBFT", **QUICK}))
    assert rep["audit"]["violations"] == 0
    assert rep["config"]["protocol"] == "PBFT"
    assert set(rep["latency_ms"]) == {"p50", "p90", "p99", "mean"}
    assert rep["latency_ms"]["p50"] <= rep["latency_ms"]["p90"] <= rep["latency_ms"]["p99"]
    assert set(rep["messages"]) == {"0", "1", "2", "3"}
    assert rep["throughput"] == rep["accepted"] / 0.5


def test_identical_config_and_seed_give_identical_reports():
    cfg = parse_config({"protocol": "Kauri", "jitter": 0.3, **QUICK})
    a = run_once(cfg, keep_trace=True)
    b = run_once(cfg, keep_trace=True)
    assert a["_trace"] == b["_trace"]
    assert emit_report(a) == emit_report(b)
    c = run_once(cfg, seed=cfg.seed + 1, keep_trace=True)
    assert c["_trace"] != a["_trace"]


@pytest.mark.parametrize("protocol", ["SBFT", "HotStuff", "Zyzzyva"])
def test_accepted_requests_were_committed(protocol):
    cfg = parse_config({"protocol": protocol, **QUICK})
    run = harness.setup(cfg)
    run.sim.start()
    run.sim.run(until=cfg.duration)
    rec = run.ctx.rec
    measured = [(seq, state) for seq, state, _p, _t0, t1 in rec.accepted.values()
                if t1 < cfg.duration - cfg.cooldown]
    assert measured
    assert all(rec.committed[seq][1] == state for seq, state in measured)
    assert set(rec.accepted) <= rec.submitted


def test_repeats_average_over_seeds():
    rep = run_experiment(parse_config({"protocol": "PBFT", "repeats": 3, "jitter": 0.5, **QUICK}))
    assert [p["seed"] for p in rep["per_seed"]] == [1, 2, 3]
    mean = sum(p["throughput"] for p in rep["per_seed"]) / 3
    assert rep["throughput"] == pytest.approx(mean, abs=1e-3)


def test_saturation_stops_at_the_knee():
    cfg = parse_config({"protocol": "PBFT", "max_clients": 256, **QUICK,
                        "engine": {"batch_size": 8}})
    best, points = saturate(cfg)
    assert len(points) >= 2
    assert points[-1]["throughput"] < best["throughput"] * 1.02 or points[-1]["clients"] * 2 > 256
    assert [p["clients"] for p in points] == [4 * 2 ** i for i in range(len(points))]


def test_sweep_points():
    cfg = parse_config({"protocol": "PBFT", "sweep": {"f": [1, 5], "engine.batch_size": [200, 400]}})
    pts = sweep_points(cfg)
    assert [(p.n, p.engine["batch_size"]) for p in pts] == [(4, 200), (4, 400), (16, 200), (16, 400)]
    assert sweep_points(parse_config({"protocol": "PBFT"})) == [parse_config({"protocol": "PBFT"})]


def test_violations_raise(monkeypatch):
    def broken(self):
        self.violations.append("agreement: forced for the test")
    monkeypatch.setattr(harness.Recorder, "cross_check", broken)
    with pytest.raises(InvariantViolation, match="forced"):
        run_once(parse_config({"protocol": "PBFT", **QUICK}))


def test_geo_preset_uses_inter_site_latency():
    cfg = parse_config({"protocol": "PBFT", "preset": "geo", "clients": 4,
                        "duration": 6_000_000, "warmup": 2_000_000, "cooldown": 1_000_000})
    rep = run_once(cfg)
    assert rep["accepted"] > 0
    # at least two one-way inter-site delays between proposal and commit
    assert rep["latency_ms"]["p50"] >= 2 * 33 / 2

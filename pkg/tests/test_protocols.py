from collections import Counter, defaultdict

import pytest

from bftlab.design_space import EXECUTABLE
from bftlab.harness import parse_config, run_once, safety_run, safety_scenarios, single_instance
from bftlab.protocols import default_fanout

# good-case hops until the first replica learns commitment (h = 2)
GOOD_CASE = {"PBFT": 3, "Zyzzyva": 1, "Zyzzyva5": 1, "PoE": 3, "SBFT": 3, "FaB": 2,
             "HotStuff": 7, "Themis": 8, "Kauri": 14, "FLB": 2, "FTB": 6}

SHORT = dict(clients=8, duration=3_000_000, warmup=1_000_000, cooldown=1_000_000)
CLIENT_TYPES = {"REQUEST", "REPLY", "RELAY", "ACK", "COMMIT_CERT"}


def short_run(protocol, **kw):
    return run_once(parse_config({"protocol": protocol, "f": 1, **SHORT, **kw}))


@pytest.mark.parametrize("protocol", EXECUTABLE)
def test_failure_free_phase_audit(protocol):
    rep = short_run(protocol)
    assert rep["audit"]["violations"] == 0
    assert rep["view_changes"] == 0
    assert list(rep["phase_audit"]) == ["fast"]
    assert list(rep["phase_audit"]["fast"]) == [str(GOOD_CASE[protocol])]
    assert rep["accepted"] > 0


def test_sbft_slow_path_with_crashed_backup():
    rep = short_run("SBFT", faults=[{"node": 1, "crash_at": 0}])
    assert set(rep["phase_audit"]) == {"slow"}
    assert list(rep["phase_audit"]["slow"]) == ["5"]
    assert set(rep["paths"]) == {"slow"}


@pytest.mark.parametrize("protocol,far", [("Zyzzyva", {"3": "far"}),
                                          ("Zyzzyva5", {"4": "far", "5": "far"})])
def test_zyzzyva_slow_path_with_distant_replicas(protocol, far):
    rep = short_run(protocol, sites=far, latency={"far-local": 20_000})
    assert list(rep["phase_audit"]["slow"]) == ["3"]
    assert set(rep["paths"]) == {"slow"}


def test_zyzzyva5_stays_fast_with_crashed_backup():
    rep = short_run("Zyzzyva5", faults=[{"node": 1, "crash_at": 0}])
    assert set(rep["paths"]) == {"fast"}


def consensus_counts(run):
    c = Counter()
    for (src, mtype), st in run.sim.sent_by_type.items():
        if src < run.spec.n and mtype not in CLIENT_TYPES:
            c[mtype] += st.messages
    return c


@pytest.mark.parametrize("f", [1, 5, 10])
def test_pbft_message_count_is_exact(f):
    run = single_instance("PBFT", f)
    n = run.spec.n
    c = consensus_counts(run)
    assert c == {"PROPOSE": n - 1, "PREPARE": n * (n - 1), "COMMIT": n * (n - 1)}
    assert sum(c.values()) == (n - 1) + 2 * n * (n - 1)


@pytest.mark.parametrize("f", [1, 5, 10])
def test_hotstuff_linear_per_phase(f):
    run = single_instance("HotStuff", f)
    n = run.spec.n
    c = consensus_counts(run)
    blocks = c["PROPOSE"] // (n - 1)
    assert blocks >= 4
    assert c["PROPOSE"] + c["VOTE"] <= blocks * 2 * (n - 1)


def peer_degree(run):
    peers = defaultdict(set)
    for line in run.sim.trace_lines:
        _, kind, src, dst, mtype, *_ = line.split()
        src, dst = int(src), int(dst)
        if kind == "send" and mtype not in CLIENT_TYPES and src < run.spec.n:
            peers[src].add(dst)
            peers[dst].add(src)
    return peers


@pytest.mark.parametrize("protocol,f", [("Kauri", 1), ("Kauri", 5), ("Kauri", 10),
                                        ("FTB", 1), ("FTB", 3), ("FTB", 6)])
def test_tree_degree_bound(protocol, f):
    run = single_instance(protocol, f)
    d = default_fanout(run.spec.n)
    peers = peer_degree(run)
    assert len(peers) == run.spec.n
    assert max(len(p) for p in peers.values()) <= d + 1
    assert len(run.ctx.rec.accepted) == 1


@pytest.mark.parametrize("protocol", EXECUTABLE)
def test_fault_scenarios_are_safe(protocol):
    for scenario in safety_scenarios(protocol, 1):
        rep = safety_run(protocol, 1, scenario, seed=11)
        assert rep["audit"]["violations"] == 0, (scenario, rep["audit"])
        assert rep["accepted"] > 0, scenario


def test_leaf_scenario_only_for_trees():
    assert "crashed-leaf" in safety_scenarios("Kauri", 1)
    assert "crashed-leaf" not in safety_scenarios("PBFT", 1)


def test_crashed_leader_triggers_view_change():
    rep = safety_run("PBFT", 1, "crashed-leader", seed=2)
    assert rep["view_changes"] >= 1
    assert rep["audit"]["stalled_requests"] == 0

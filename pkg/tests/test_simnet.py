import io
from dataclasses import dataclass

import pytest
from hypothesis import given, settings, strategies as st

from bftlab.simnet import (FaultPlan, FaultPlanError, NetworkModel, Node, NodeFault,
                           SimulationFault, Simulator)


@dataclass
class Ping:
    type: str
    view: int
    seq: int


class Echo(Node):
    """Sends `count` pings to a peer; echoes what it receives once."""

    def __init__(self, node_id, peer, count=0, cost=0, size=100):
        super().__init__(node_id)
        self.peer, self.count, self.cost, self.size = peer, count, cost, size
        self.received = []
        self.timers = []

    def on_start(self):
        for i in range(self.count):
            self.send(self.peer, Ping("PING", 0, i), self.size)
        self.set_timer(1000, "tick")

    def on_message(self, src, msg):
        self.charge(self.cost)
        self.received.append((self.now, src, msg.seq))
        if msg.type == "PING":
            self.send(src, Ping("PONG", 0, msg.seq), self.size)

    def on_timer(self, tag):
        self.timers.append((self.now, tag))


def run_pair(seed=1, jitter=0.0, count=5, cost=0, trace=False):
    net = NetworkModel(jitter=jitter)
    sim = Simulator(net, seed=seed, keep_trace=trace)
    a, b = Echo(0, 1, count=count), Echo(1, 0, cost=cost)
    sim.add_nodes([a, b])
    sim.start()
    sim.run(until=1_000_000)
    return sim, a, b


def test_local_delivery_time():
    sim, a, b = run_pair(count=1)
    # 100 bytes at 1250 B/us serializes in 0 whole microseconds
    assert b.received == [(500, 0, 0)]
    assert a.received == [(1000, 1, 0)]


def test_geo_latency_from_rtt():
    net = NetworkModel(sites={0: "TY", 1: "SU"}, latency={("TY", "SU"): 16_500})
    assert net.one_way(0, 1) == net.one_way(1, 0) == 16_500


def test_serialization_is_fifo_per_sender():
    net = NetworkModel(bandwidth=1.0)
    sim = Simulator(net)
    a, b = Echo(0, 1, count=3, size=1000), Echo(1, 0)
    sim.add_nodes([a, b])
    sim.start()
    sim.run(until=100_000)
    times = [t for t, _, _ in b.received]
    assert times == [1500, 2500, 3500]


def test_crashed_sender_sends_nothing():
    sim = Simulator(faults=FaultPlan.crash(0, at=0))
    a, b = Echo(0, 1, count=3), Echo(1, 0)
    sim.add_nodes([a, b])
    sim.start()
    sim.run(until=10_000)
    assert b.received == [] and a.timers == []


def test_crashed_receiver_absorbs():
    sim = Simulator(faults=FaultPlan.crash(1, at=0), keep_trace=True)
    a, b = Echo(0, 1, count=2), Echo(1, 0)
    sim.add_nodes([a, b])
    sim.start()
    sim.run(until=10_000)
    assert b.received == []
    assert sum(" absorb " in line for line in sim.trace_lines) == 2


def test_cpu_serializes_events():
    sim, a, b = run_pair(count=3, cost=200)
    assert [t for t, _, _ in b.received] == [500, 700, 900]
    # replies leave after the processing that produced them
    assert [t for t, _, _ in a.received] == [1200, 1400, 1600]
    assert sim.cpu_busy[1] == 600


def test_determinism_with_jitter():
    s1, _, _ = run_pair(seed=42, jitter=0.5, count=20, trace=True)
    s2, _, _ = run_pair(seed=42, jitter=0.5, count=20, trace=True)
    s3, _, _ = run_pair(seed=43, jitter=0.5, count=20, trace=True)
    assert s1.trace_lines == s2.trace_lines
    assert s1.trace_digest() == s2.trace_digest()
    assert s1.trace_digest() != s3.trace_digest()


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=0, max_value=1))
def test_fifo_causality_and_bound(seed, jitter):
    sim, a, b = run_pair(seed=seed, jitter=jitter, count=30)
    seqs = [s for _, _, s in b.received]
    assert seqs == sorted(seqs)
    assert sim.audit["causality"] == 0 and sim.audit["post_gst_bound"] == 0
    assert sim.audit["max_post_gst_delay"] <= sim.network.delta


def test_cpu_conservation():
    sim, a, b = run_pair(count=10, cost=37)
    assert sim.cpu_busy[1] == 370
    assert sim.utilization(1) <= 1.0


def test_pre_gst_drops_are_seeded():
    def dropped(seed):
        net = NetworkModel(gst=10**9, pre_gst_drop=0.5)
        sim = Simulator(net, seed=seed)
        sim.add_nodes([Echo(0, 1, count=50), Echo(1, 0)])
        sim.start()
        sim.run(until=10**6)
        return sim.audit["dropped"]
    assert dropped(5) == dropped(5)
    assert 0 < dropped(5) < 100


def test_trace_export_format():
    buf = io.StringIO()
    sim = Simulator(trace_file=buf)
    sim.add_nodes([Echo(0, 1, count=1), Echo(1, 0)])
    sim.start()
    sim.run(until=5000)
    first = buf.getvalue().splitlines()[0].split()
    assert first == ["0", "send", "0", "1", "PING", "0", "0", "100"]


def test_timer_cancel():
    class T(Node):
        def on_start(self):
            self.fired = []
            h = self.set_timer(10, "a")
            self.set_timer(20, "b")
            self.cancel_timer(h)

        def on_timer(self, tag):
            self.fired.append(tag)

    sim = Simulator()
    t = sim.add_node(T(0))
    sim.start()
    sim.run()
    assert t.fired == ["b"]


def test_unknown_target_is_internal_fault():
    sim = Simulator()
    sim.add_node(Echo(0, 9, count=1))
    with pytest.raises(SimulationFault):
        sim.start()


def test_fault_plan_bound():
    plan = FaultPlan({0: NodeFault(crash_at=0), 1: NodeFault(equivocate_as_leader=True)})
    plan.check(2)
    with pytest.raises(FaultPlanError):
        plan.check(1)

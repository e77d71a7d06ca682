"""Deterministic discrete-event network simulator.

Time is an integer count of microseconds. Events are totally ordered by
(fire time, insertion sequence). Each node owns one serial CPU: an event that
arrives while the node is busy waits until the node is free, and the work a
handler charges occupies the node before any of its outgoing messages leave.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, TextIO

DELIVER = 0
TIMER = 1
CALL = 2
WAKE = 3

LOCAL_ONE_WAY_US = 500
LOCAL_BANDWIDTH = 1250.0     # bytes per microsecond (10 Gbit/s)
GEO_BANDWIDTH = 125.0        # bytes per microsecond (1 Gbit/s)


class SimulationFault(Exception):
    """Internal fault: the run halts and the trace so far is kept."""


class FaultPlanError(ValueError):
    pass


@dataclass
class NetworkModel:
    sites: dict = field(default_factory=dict)           # node -> site name
    latency: dict = field(default_factory=dict)         # (site, site) -> one-way us
    default_latency: int = LOCAL_ONE_WAY_US
    jitter: float = 0.0                                  # uniform fraction of latency
    bandwidth: float = LOCAL_BANDWIDTH
    gst: int = 0
    pre_gst_drop: float = 0.0
    pre_gst_max_delay: int = 0

    def site(self, node: int) -> str:
        return self.sites.get(node, "local")

    def one_way(self, a: int, b: int) -> int:
        sa, sb = self.site(a), self.site(b)
        if sa == sb:
            return self.latency.get((sa, sb), self.default_latency)
        if (sa, sb) in self.latency:
            return self.latency[(sa, sb)]
        return self.latency.get((sb, sa), self.default_latency)

    @property
    def delta(self) -> int:
        """Upper bound on post-GST propagation delay between any two sites."""
        worst = max([self.default_latency, *self.latency.values()])
        return worst + int(worst * self.jitter) + 1


@dataclass
class NodeFault:
    crash_at: int | None = None
    silent_to_clients: bool = False
    equivocate_as_leader: bool = False
    drop_incoming: float = 0.0

    @property
    def byzantine(self) -> bool:
        return self.silent_to_clients or self.equivocate_as_leader or self.drop_incoming > 0


@dataclass
class FaultPlan:
    nodes: dict = field(default_factory=dict)            # node id -> NodeFault

    def faulty(self) -> set:
        return {n for n, d in self.nodes.items()
                if d.crash_at is not None or d.byzantine}

    def check(self, f: int) -> None:
        if len(self.faulty()) > f:
            raise FaultPlanError(f"{len(self.faulty())} faulty nodes exceed f = {f}")

    def get(self, node: int) -> NodeFault:
        return self.nodes.get(node) or NodeFault()

    @classmethod
    def crash(cls, node: int, at: int = 0) -> "FaultPlan":
        return cls({node: NodeFault(crash_at=at)})


class Node:
    """Base class for anything attached to the simulator."""

    def __init__(self, node_id: int):
        self.id = node_id
        self.sim: Simulator | None = None

    # called by the simulator
    def on_message(self, src: int, msg: Any) -> None:
        raise NotImplementedError

    def on_timer(self, tag: Any) -> None:
        raise NotImplementedError

    def on_start(self) -> None:
        pass

    # helpers
    @property
    def now(self) -> int:
        return self.sim.now

    def charge(self, micros: int) -> None:
        self.sim.charge(micros)

    def send(self, dst: int, msg: Any, size: int) -> None:
        self.sim.send(self.id, dst, msg, size)

    def set_timer(self, delay: int, tag: Any) -> int:
        return self.sim.set_timer(self.id, delay, tag)

    def cancel_timer(self, handle: int | None) -> None:
        if handle is not None:
            self.sim.cancel_timer(handle)


@dataclass
class LinkStats:
    messages: int = 0
    bytes: int = 0


class Simulator:
    def __init__(self, network: NetworkModel | None = None, seed: int = 0,
                 faults: FaultPlan | None = None, trace: bool = False,
                 trace_file: TextIO | None = None, keep_trace: bool = False):
        self.network = network or NetworkModel()
        self.faults = faults or FaultPlan()
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.nodes: dict[int, Node] = {}
        self._queue: list = []
        self._seq = 0
        self._timer_ids = 0
        self._cancelled: set = set()
        self._busy_until: dict[int, int] = {}
        self._backlog: dict[int, deque] = {}
        self._link_free: dict[int, int] = {}
        self._last_arrival: dict[tuple, int] = {}
        self._handling: int | None = None
        self._cost = 0
        self._outbox: list = []
        self.cpu_busy: dict[int, int] = {}
        self.sent: dict[int, LinkStats] = {}
        self.sent_by_type: dict[tuple, LinkStats] = {}
        self.edges: set = set()
        self.audit = {"causality": 0, "fifo": 0, "post_gst_bound": 0,
                      "max_post_gst_delay": 0, "dropped": 0}
        self._trace_on = trace or trace_file is not None or keep_trace
        self._trace_hash = hashlib.sha256()
        self._trace_file = trace_file
        self.trace_lines: list[str] | None = [] if keep_trace else None
        self._crash_at = {n: d.crash_at for n, d in self.faults.nodes.items()
                          if d.crash_at is not None}
        self._drop_in = {n: d.drop_incoming for n, d in self.faults.nodes.items()
                         if d.drop_incoming > 0}
        self.honest = None   # set of nodes audited for the post-GST bound

    # -- topology

    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise SimulationFault(f"duplicate node id {node.id}")
        node.sim = self
        self.nodes[node.id] = node
        self._busy_until[node.id] = 0
        self.cpu_busy[node.id] = 0
        return node

    def add_nodes(self, nodes: Iterable[Node]) -> None:
        for n in nodes:
            self.add_node(n)

    def crashed(self, node: int, at: int | None = None) -> bool:
        t = self._crash_at.get(node)
        return t is not None and (self.now if at is None else at) >= t

    # -- tracing

    def _trace(self, time, kind, src, dst, msg, size):
        if not self._trace_on:
            return
        if isinstance(msg, str):
            mtype = msg
        elif isinstance(msg, tuple):
            mtype = str(msg[0]) if msg else "-"
        else:
            mtype = getattr(msg, "type", type(msg).__name__)
        view = getattr(msg, "view", "-")
        seq = getattr(msg, "seq", "-")
        line = f"{time} {kind} {src} {dst} {mtype} {view} {seq} {size}"
        self._trace_hash.update(line.encode())
        self._trace_hash.update(b"\n")
        if self._trace_file is not None:
            self._trace_file.write(line + "\n")
        if self.trace_lines is not None:
            self.trace_lines.append(line)

    @property
    def tracing(self) -> bool:
        return self._trace_on

    def trace_digest(self) -> str:
        return self._trace_hash.hexdigest()

    # -- scheduling

    def _push(self, time: int, kind: int, target: int, payload: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, kind, target, payload))

    def charge(self, micros: int) -> None:
        if self._handling is None:
            raise SimulationFault("CPU charged outside an event handler")
        self._cost += int(micros)

    def send(self, src: int, dst: int, msg: Any, size: int) -> None:
        if self.crashed(src):
            return
        if self._handling == src:
            self._outbox.append((dst, msg, size))
        else:
            self._transmit(src, dst, msg, size, self.now)

    def _transmit(self, src: int, dst: int, msg: Any, size: int, depart: int) -> None:
        if dst not in self.nodes:
            raise SimulationFault(f"message to unknown node {dst}")
        net = self.network
        start = max(depart, self._link_free.get(src, 0))
        serialization = int(size / net.bandwidth) if net.bandwidth > 0 else 0
        done = start + serialization
        self._link_free[src] = done
        base = net.one_way(src, dst) if src != dst else 0
        delay = base
        if net.jitter and base:
            delay += int(base * net.jitter * self.rng.random())
        stats = self.sent.setdefault(src, LinkStats())
        stats.messages += 1
        stats.bytes += size
        tstats = self.sent_by_type.setdefault((src, getattr(msg, "type", "?")), LinkStats())
        tstats.messages += 1
        tstats.bytes += size
        self.edges.add((src, dst))
        self._trace(start, "send", src, dst, msg, size)
        if start < net.gst:
            if net.pre_gst_drop and self.rng.random() < net.pre_gst_drop:
                self.audit["dropped"] += 1
                self._trace(start, "drop", src, dst, msg, size)
                return
            if net.pre_gst_max_delay:
                delay += self.rng.randrange(net.pre_gst_max_delay + 1)
        elif self.honest is None or (src in self.honest and dst in self.honest):
            self.audit["max_post_gst_delay"] = max(self.audit["max_post_gst_delay"], delay)
            if delay > net.delta:
                self.audit["post_gst_bound"] += 1
        arrival = done + delay
        key = (src, dst)
        last = self._last_arrival.get(key, 0)
        if arrival < last:
            arrival = last
        self._last_arrival[key] = arrival
        if arrival < depart:
            self.audit["causality"] += 1
        self._push(arrival, DELIVER, dst, (src, msg, size))

    def set_timer(self, node: int, delay: int, tag: Any) -> int:
        if delay < 0:
            raise SimulationFault("negative timer delay")
        self._timer_ids += 1
        handle = self._timer_ids
        base = self.now if self._handling != node else self.now + self._cost
        self._push(base + int(delay), TIMER, node, (handle, tag))
        return handle

    def cancel_timer(self, handle: int) -> None:
        self._cancelled.add(handle)

    def call_at(self, time: int, node: int, fn: Callable[[], None]) -> None:
        self._push(max(time, self.now), CALL, node, fn)

    # -- main loop

    def start(self) -> None:
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            self._run_handler(node_id, node.on_start)

    def _run_handler(self, node_id: int, fn: Callable, *args) -> None:
        self._handling = node_id
        self._cost = 0
        self._outbox = []
        try:
            fn(*args)
        finally:
            self._handling = None
        cost = self._cost
        end = self.now + cost
        self._busy_until[node_id] = end
        self.cpu_busy[node_id] += cost
        outbox = self._outbox
        self._outbox = []
        for dst, msg, size in outbox:
            self._transmit(node_id, dst, msg, size, end)

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        """Process events until time ``until`` or quiescence. Returns events processed."""
        processed = 0
        queue = self._queue
        backlog = self._backlog
        while queue:
            time, _, kind, target, payload = queue[0]
            if until is not None and time > until:
                break
            heapq.heappop(queue)
            node = self.nodes.get(target)
            if node is None:
                raise SimulationFault(f"event for unknown node {target}")
            woke = kind == WAKE
            if woke:
                pending = backlog[target]
                kind, payload = pending.popleft()
            else:
                pending = backlog.get(target)
                if pending or self._busy_until[target] > time:
                    # node is busy: queue behind earlier arrivals, FIFO
                    if pending is None:
                        pending = backlog[target] = deque()
                    if not pending:
                        self._push(self._busy_until[target], WAKE, target, None)
                    pending.append((kind, payload))
                    continue
            if self._dispatch(time, kind, target, node, payload):
                processed += 1
            if woke and pending:
                self._push(max(time, self._busy_until[target]), WAKE, target, None)
            if max_events is not None and processed >= max_events:
                break
        if until is not None and (not queue or queue[0][0] > until):
            self.now = max(self.now, until)
        return processed

    def _dispatch(self, time: int, kind: int, target: int, node, payload) -> bool:
        if kind == TIMER and payload[0] in self._cancelled:
            self._cancelled.discard(payload[0])
            return False
        crash = self._crash_at.get(target)
        if crash is not None and time >= crash:
            if kind == DELIVER:
                self._trace(time, "absorb", payload[0], target, payload[1], payload[2])
            return False
        self.now = time
        if kind == DELIVER:
            src, msg, size = payload
            drop = self._drop_in.get(target)
            if drop and self.rng.random() < drop:
                self.audit["dropped"] += 1
                self._trace(time, "drop", src, target, msg, size)
                return False
            self._trace(time, "deliver", src, target, msg, size)
            self._run_handler(target, node.on_message, src, msg)
        elif kind == TIMER:
            self._trace(time, "timer", target, target, payload[1], 0)
            self._run_handler(target, node.on_timer, payload[1])
        else:
            self._run_handler(target, payload)
        return True

    def utilization(self, node: int, elapsed: int | None = None) -> float:
        elapsed = self.now if elapsed is None else elapsed
        return self.cpu_busy[node] / elapsed if elapsed else 0.0

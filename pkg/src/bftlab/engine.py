"""Protocol-independent replica runtime pieces.

Replicas and client machines are simulator nodes. Node ids 0..n-1 are
replicas; client machines follow. A request id is ``(machine, client, num)``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable

from .auth import AuthModel, Envelope, Scheme
from .simnet import Node, NodeFault

MASK = (1 << 61) - 1


def batch_digest(rids: tuple) -> int:
    # hashes of int tuples do not depend on PYTHONHASHSEED
    return hash(("batch", rids)) & MASK


def chain(state: int, seq: int, digest: int) -> int:
    return hash((state, seq, digest)) & MASK


NULL_DIGEST = batch_digest(())
GENESIS = 0


class Msg:
    __slots__ = ("type", "view", "seq", "digest", "data", "hops", "auth", "size", "extra")

    def __init__(self, type: str, view: int = 0, seq: int = 0, digest: Any = None,
                 data: Any = None, hops: int = 0, auth: Envelope | None = None):
        self.type = type
        self.view = view
        self.seq = seq
        self.digest = digest
        self.data = data
        self.hops = hops
        self.auth = auth
        self.size = 0
        self.extra = None

    def key(self) -> tuple:
        return (self.type, self.view, self.seq, self.digest)

    def __repr__(self):
        return f"Msg({self.type}, v={self.view}, s={self.seq}, d={self.digest})"


class Batch:
    """Ordered client requests. The digest is a function of the id list only."""

    __slots__ = ("rids", "digest", "_groups")

    def __init__(self, rids: Iterable):
        self.rids = tuple(rids)
        self.digest = batch_digest(self.rids)
        self._groups = None

    def __len__(self):
        return len(self.rids)

    def by_machine(self) -> dict:
        if self._groups is None:
            groups: dict = {}
            for rid in self.rids:
                groups.setdefault(rid[0], []).append(rid)
            self._groups = groups
        return self._groups


NULL_BATCH = Batch(())


@dataclass
class EngineConfig:
    """Runtime knobs. Times are simulated microseconds, sizes bytes, costs
    simulated CPU microseconds. These are declared model parameters."""

    batch_size: int = 400
    batch_timeout: int = 5_000
    window: int = 16
    checkpoint_interval: int = 128
    watermark: int = 256
    tau1: int = 5_000
    tau2: int = 50_000
    tau3: int = 5_000
    tau6: int = 1_000
    pacemaker_min: int = 10_000
    child_timeout: int = 2_000
    stretch: int = 4
    fanout: int = 0                  # 0 picks the smallest d giving height 2
    request_size: int = 128
    reply_size: int = 128
    header_size: int = 64
    rid_size: int = 32
    recv_cost: int = 8
    send_cost: int = 2
    per_kb_cost: int = 1
    exec_cost: int = 1
    order_cost: int = 1              # per (request, report) pair in fair ordering

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class QuorumTracker:
    """Distinct-sender votes per digest; reports satisfaction once."""

    __slots__ = ("threshold", "votes", "hops", "done", "items")

    def __init__(self, threshold: int):
        self.threshold = threshold
        self.votes: dict = {}
        self.hops: dict = {}
        self.items: dict = {}
        self.done = None

    def add(self, sender: int, digest: Any, hops: int = 0, item: Any = None) -> bool:
        voters = self.votes.setdefault(digest, set())
        if sender in voters:
            return False
        voters.add(sender)
        if item is not None:
            self.items.setdefault(digest, []).append(item)
        if hops > self.hops.get(digest, -1):
            self.hops[digest] = hops
        if self.done is None and len(voters) >= self.threshold:
            self.done = digest
            return True
        return False

    def count(self, digest: Any) -> int:
        return len(self.votes.get(digest, ()))

    @property
    def satisfied(self) -> bool:
        return self.done is not None


class Recorder:
    """Run-wide safety audit and measurement sink."""

    def __init__(self, honest: Iterable[int]):
        self.honest = set(honest)
        self.submitted: set = set()
        self.committed: dict[int, tuple] = {}          # seq -> (digest, state)
        self.replica_commits: dict = defaultdict(dict)  # replica -> seq -> digest
        self.executed: dict = defaultdict(int)          # replica -> last executed seq
        self.floor: dict = defaultdict(int)             # replica -> highest committed prefix
        self.violations: list[str] = []
        self.learn_hops: dict = {}                      # (key, path) -> hops
        self.commit_time: dict = {}                     # seq -> first commit time
        self.accepted: dict = {}                        # rid -> record
        self.view_changes = 0
        self.view_installs: dict = defaultdict(int)
        self.now = lambda: 0

    def _violate(self, kind: str, detail: str) -> None:
        self.violations.append(f"{kind}: {detail}")

    # -- replica events

    def execute(self, replica: int, seq: int) -> None:
        if replica not in self.honest:
            return
        if seq != self.executed[replica] + 1:
            self._violate("prefix", f"replica {replica} executed {seq} after "
                          f"{self.executed[replica]}")
        self.executed[replica] = seq

    def rollback(self, replica: int, to: int) -> None:
        if replica not in self.honest:
            return
        if to < self.floor[replica]:
            self._violate("write-once", f"replica {replica} rolled back to {to} below "
                          f"committed {self.floor[replica]}")
        self.executed[replica] = min(self.executed[replica], to)

    def jump(self, replica: int, seq: int) -> None:
        """State transfer installed a committed prefix up to ``seq``."""
        if replica in self.honest:
            self.executed[replica] = max(self.executed[replica], seq)

    def commit(self, replica: int, seq: int, digest: int, state: int,
               rids: tuple = ()) -> None:
        if replica not in self.honest:
            return
        mine = self.replica_commits[replica]
        prev = mine.get(seq)
        if prev is not None:
            if prev != digest:
                self._violate("write-once", f"replica {replica} seq {seq} {prev} -> {digest}")
            return
        mine[seq] = digest
        if seq == self.floor[replica] + 1:
            f = seq
            while f + 1 in mine:
                f += 1
            self.floor[replica] = f
        known = self.committed.get(seq)
        if known is None:
            self.committed[seq] = (digest, state)
            self.commit_time[seq] = self.now()
            missing = [r for r in rids if r not in self.submitted]
            if missing:
                self._violate("validity", f"seq {seq} holds unsubmitted {missing[:3]}")
        elif known[0] != digest or known[1] != state:
            self._violate("agreement", f"seq {seq}: {known} vs {(digest, state)} at {replica}")

    def learn(self, key: Any, hops: int, path: str = "fast") -> None:
        k = (key, path)
        old = self.learn_hops.get(k)
        if old is None or hops < old:
            self.learn_hops[k] = hops

    def view_change(self, replica: int, view: int) -> None:
        if replica in self.honest:
            self.view_installs[view] += 1
            if self.view_installs[view] == 1:
                self.view_changes += 1

    # -- client events

    def submit(self, rid: tuple) -> None:
        self.submitted.add(rid)

    def accept(self, rid: tuple, seq: int, state: int, path: str,
               submit_time: int, accept_time: int) -> None:
        if rid in self.accepted:
            self._violate("client", f"{rid} accepted twice")
            return
        self.accepted[rid] = (seq, state, path, submit_time, accept_time)

    def cross_check(self) -> None:
        """Accepted results must match what honest replicas committed."""
        for rid, (seq, state, *_rest) in self.accepted.items():
            known = self.committed.get(seq)
            if known is not None and known[1] != state:
                self._violate("client", f"{rid} accepted state {state} at {seq}, "
                              f"committed {known[1]}")

    def summary(self) -> dict:
        return {"violations": len(self.violations),
                "agreement": sum(v.startswith("agreement") for v in self.violations),
                "prefix": sum(v.startswith("prefix") for v in self.violations),
                "write_once": sum(v.startswith("write-once") for v in self.violations),
                "validity": sum(v.startswith("validity") for v in self.violations),
                "client": sum(v.startswith("client") for v in self.violations),
                "committed_instances": len(self.committed),
                "view_changes": self.view_changes}


@dataclass
class Context:
    """Shared, read-mostly state for one simulation run."""

    n: int
    f: int
    cfg: EngineConfig
    auth: AuthModel
    rec: Recorder
    clients: list = field(default_factory=list)
    spec: Any = None
    faults: dict = field(default_factory=dict)
    rtt: int = 1_000                 # worst replica round trip, for hold timers

    def fault(self, node: int) -> NodeFault:
        return self.faults.get(node) or NodeFault()


class ReplicaBase(Node):
    """Message plumbing shared by every replica: costs, auth, execution, replies."""

    # message types that legitimately carry another node's authenticator
    relayed_types = frozenset({"RELAY"})

    def __init__(self, node_id: int, ctx: Context):
        super().__init__(node_id)
        self.ctx = ctx
        self.n, self.f, self.cfg = ctx.n, ctx.f, ctx.cfg
        self.auth = ctx.auth
        self.rec = ctx.rec
        self.fault = ctx.fault(node_id)
        self.equivocator = self.fault.equivocate_as_leader
        self.others = [r for r in range(self.n) if r != node_id]
        self.hops_in = 0
        self.state = GENESIS
        self.exec_seq = 0
        self.executed_num: dict = {}
        self.reply_cache: dict = {}
        self.rejected = 0

    # -- costs and sending

    def _kb(self, size: int) -> int:
        return (size * self.cfg.per_kb_cost) >> 10

    def emit(self, dst: int, msg: Msg, body: int = 0) -> None:
        size = self.cfg.header_size + body
        if msg.auth is not None:
            size += self.auth.size(msg.auth)
        msg.size = size
        self.charge(self.cfg.send_cost + self._kb(size))
        self.send(dst, msg, size)

    def multicast(self, dsts: Iterable[int], msg: Msg, body: int = 0,
                  scheme: Scheme | str | None = Scheme.MAC_VECTOR) -> None:
        dsts = list(dsts)
        if not dsts:
            return
        if scheme is not None and msg.auth is None:
            msg.auth = self.authenticate(msg, dsts, scheme)
        for d in dsts:
            self.emit(d, msg, body)

    def authenticate(self, msg: Msg, dsts: Iterable[int], scheme) -> Envelope:
        scheme = Scheme(scheme)
        if scheme is Scheme.MAC_VECTOR:
            return self.auth.mac(self.id, msg.key(), dsts)
        if scheme is Scheme.SIGNATURE:
            return self.auth.sign(self.id, msg.key())
        return self.auth.share(self.id, msg.key())

    def out(self, type: str, view: int, seq: int = 0, digest: Any = None,
            data: Any = None, hops: int | None = None) -> Msg:
        return Msg(type, view, seq, digest, data, self.hops_in + 1 if hops is None else hops)

    # -- receiving

    def on_message(self, src: int, msg: Msg) -> None:
        self.charge(self.cfg.recv_cost + self._kb(msg.size))
        if self.equivocator and not self.byzantine_accepts(msg):
            return
        env = msg.auth
        if env is not None and not self.auth.verify(self.id, env):
            self.rejected += 1
            return
        if (env is not None and env.sender not in (src, AuthModel.GROUP)
                and msg.type not in self.relayed_types):
            self.rejected += 1
            return
        self.hops_in = msg.hops
        handler = getattr(self, "on_" + msg.type, None)
        if handler is None:
            raise RuntimeError(f"replica {self.id} has no handler for {msg.type}")
        handler(src, msg)

    def byzantine_accepts(self, msg: Msg) -> bool:
        """An equivocating node only reacts to client traffic."""
        return msg.type in ("REQUEST", "RELAY")

    def on_timer(self, tag: Any) -> None:
        self.hops_in = 0
        name = tag[0] if isinstance(tag, tuple) else tag
        getattr(self, "timer_" + name)(tag)

    # -- requests

    def fresh(self, rid: tuple) -> bool:
        return rid[2] > self.executed_num.get((rid[0], rid[1]), 0)

    def apply_batch(self, seq: int, batch: Batch) -> tuple[int, dict]:
        """Execute ``batch`` as instance ``seq``. Returns (state, machine -> rids)."""
        self.charge(self.cfg.exec_cost * len(batch))
        self.state = chain(self.state, seq, batch.digest)
        done: dict = {}
        for rid in batch.rids:
            key = (rid[0], rid[1])
            if rid[2] > self.executed_num.get(key, 0):
                self.executed_num[key] = rid[2]
                done.setdefault(rid[0], []).append(rid)
        self.exec_seq = seq
        self.rec.execute(self.id, seq)
        return self.state, done

    def send_replies(self, view: int, seq: int, state: int, done: dict,
                     path: str = "fast", scheme=Scheme.MAC_VECTOR, extra: tuple = ()) -> None:
        for machine, rids in done.items():
            rids = tuple(rids)
            for rid in rids:
                self.reply_cache[(rid[0], rid[1])] = (rid[2], view, seq, state, path)
            self.reply(machine, view, seq, state, rids, path, scheme, extra=extra)

    def reply(self, machine: int, view: int, seq: int, state: int, rids: tuple,
              path: str, scheme=Scheme.MAC_VECTOR, env: Envelope | None = None,
              extra: tuple = ()) -> None:
        if self.fault.silent_to_clients:
            return
        msg = self.out("REPLY", view, seq, state, (rids, path) + extra)
        if env is not None:
            msg.auth = env
        elif scheme is not None:
            msg.auth = self.authenticate(msg, [machine], scheme)
        self.emit(machine, msg, self.cfg.reply_size * len(rids))

    def resend_replies(self, rids: Iterable[tuple]) -> list:
        """Answer retransmissions of executed requests; returns the unexecuted rest."""
        rest, groups = [], {}
        for rid in rids:
            cached = self.reply_cache.get((rid[0], rid[1]))
            if cached is not None and cached[0] == rid[2]:
                groups.setdefault((rid[0],) + cached[1:], []).append(rid)
            elif self.fresh(rid):
                rest.append(rid)
        for (machine, view, seq, state, path), group in groups.items():
            self.reply(machine, view, seq, state, tuple(group), path)
        return rest

    def request_body(self, rids: tuple) -> int:
        return self.cfg.request_size * len(rids)

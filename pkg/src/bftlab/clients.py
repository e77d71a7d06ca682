"""Closed-loop client machines.

A machine hosts many logical clients. Each client has at most one
outstanding request; requests that become ready in the same handler are sent
as one bundle. Replies are matched per (sequence, result) group against the
protocol's reply policy.
"""

from __future__ import annotations

from typing import Any, Callable

from .auth import Scheme
from .engine import Context, Msg
from .protocols import ReplyPolicy
from .simnet import Node


class Group:
    __slots__ = ("seq", "state", "view", "replicas", "rids", "acks", "cert_sent", "proof",
                 "hops")

    def __init__(self, seq: int, state: int, view: int):
        self.seq, self.state, self.view = seq, state, view
        self.replicas: set = set()
        self.rids: set = set()
        self.acks: set = set()
        self.cert_sent = False
        self.proof = None
        self.hops = 0


class ClientMachine(Node):
    def __init__(self, node_id: int, ctx: Context, policy: ReplyPolicy, clients: int,
                 think: int = 0, leader_of: Callable[[int], int] | None = None,
                 max_backoff: int = 8):
        super().__init__(node_id)
        self.ctx = ctx
        self.n, self.f, self.cfg = ctx.n, ctx.f, ctx.cfg
        self.auth, self.rec = ctx.auth, ctx.rec
        self.policy = policy
        self.clients = clients
        self.think = think
        self.leader_of = leader_of or (lambda v: v % self.n)
        self.max_backoff = max_backoff
        self.view = 0
        self.num = [0] * clients
        self.outstanding: dict = {}          # rid -> (submit time, bundle id)
        self.groups: dict = {}               # (seq, state) -> Group
        self.rid_groups: dict = {}           # rid -> [group keys]
        self.bundles: dict = {}              # bundle id -> (rids, backoff)
        self.ready: list = []
        self.next_bundle = 0
        self.accepted = 0
        self.conflicts = 0

    # -- submission

    def on_start(self) -> None:
        self.ready.extend(range(self.clients))
        self.flush()

    def flush(self) -> None:
        if not self.ready:
            return
        rids = []
        for cid in self.ready:
            self.num[cid] += 1
            rid = (self.id, cid, self.num[cid])
            rids.append(rid)
            self.rec.submit(rid)
        self.ready = []
        bid = self.next_bundle
        self.next_bundle += 1
        for rid in rids:
            self.outstanding[rid] = (self.now, bid)
        self.bundles[bid] = (rids, 1)
        targets = (range(self.n) if self.policy.contact == "all"
                   else [self.leader_of(self.view)])
        self.send_request(rids, targets)
        self.set_timer(self.cfg.tau1, ("t1", bid))

    def send_request(self, rids: list, targets) -> None:
        msg = Msg("REQUEST", self.view, 0, None, tuple(rids), 0)
        msg.auth = self.auth.sign(self.id, ("REQUEST", msg.data))
        self.multicast(list(targets), msg, self.cfg.request_size * len(rids))

    def multicast(self, targets: list, msg: Msg, body: int) -> None:
        size = self.cfg.header_size + body + (self.auth.size(msg.auth) if msg.auth else 0)
        msg.size = size
        for t in targets:
            self.charge(self.cfg.send_cost)
            self.send(t, msg, size)

    # -- replies

    def on_message(self, src: int, msg: Msg) -> None:
        self.charge(self.cfg.recv_cost)
        if msg.auth is not None and not self.auth.verify(self.id, msg.auth):
            return
        if msg.type == "REPLY":
            self.on_reply(src, msg)
        elif msg.type == "ACK":
            self.on_ack(src, msg)
        self.flush()

    def group(self, msg: Msg) -> Group:
        key = (msg.seq, msg.digest)
        g = self.groups.get(key)
        if g is None:
            g = self.groups[key] = Group(msg.seq, msg.digest, msg.view)
        return g

    def on_reply(self, src: int, msg: Msg) -> None:
        rids, path = msg.data[0], msg.data[1]
        live = [r for r in rids if r in self.outstanding]
        if msg.view > self.view:
            self.view = msg.view
        if not live:
            return
        g = self.group(msg)
        g.hops = max(g.hops, msg.hops)
        if len(msg.data) > 2 and g.proof is None:
            g.proof = msg.data[2]
        for r in live:
            if r not in g.rids:
                g.rids.add(r)
                self.rid_groups.setdefault(r, []).append((g.seq, g.state))
        if self.policy.combined and msg.auth is not None and msg.auth.scheme is Scheme.COMBINED:
            self.accept(g, path)
            return
        g.replicas.add(src)
        if self.policy.combined:
            # retransmitted results come back individually
            if len(g.replicas) >= self.f + 1:
                self.accept(g, path)
            return
        if len(g.replicas) >= self.policy.fast:
            self.accept(g, "fast" if path == "spec" else path)

    def on_ack(self, src: int, msg: Msg) -> None:
        g = self.groups.get((msg.seq, msg.digest))
        if g is None:
            return
        g.acks.add(src)
        if self.policy.acks is not None and len(g.acks) >= self.policy.acks:
            self.accept(g, "slow")

    def accept(self, g: Group, path: str) -> None:
        for rid in sorted(g.rids):
            entry = self.outstanding.pop(rid, None)
            if entry is None:
                continue
            self.rec.accept(rid, g.seq, g.state, path, entry[0], self.now)
            self.accepted += 1
            for key in self.rid_groups.pop(rid, ()):
                other = self.groups.get(key)
                if other is not None:
                    other.rids.discard(rid)
                    if not other.rids:
                        del self.groups[key]
            cid = rid[1]
            if self.think:
                self.set_timer(self.think, ("think", cid))
            else:
                self.ready.append(cid)
        self.groups.pop((g.seq, g.state), None)

    # -- timers

    def on_timer(self, tag: Any) -> None:
        if tag[0] == "think":
            self.ready.append(tag[1])
        elif tag[0] == "t1":
            self.on_t1(tag[1])
        self.flush()

    def on_t1(self, bid: int) -> None:
        rids, backoff = self.bundles.get(bid, ((), 1))
        live = [r for r in rids if r in self.outstanding]
        if not live:
            self.bundles.pop(bid, None)
            return
        rest = set(live)
        if self.policy.slow is not None:
            rest = self.repair(live)
        if rest:
            self.send_request(sorted(rest), range(self.n))
        backoff = min(backoff * 2, self.max_backoff)
        self.bundles[bid] = (rids, backoff)
        self.set_timer(self.cfg.tau1 * backoff, ("t1", bid))

    def repair(self, live: list) -> set:
        """Commit-certificate fallback; returns requests still needing a resend."""
        rest = set(live)
        keys = {k for r in live for k in self.rid_groups.get(r, ())}
        by_seq: dict = {}
        for key in sorted(keys):
            g = self.groups.get(key)
            if g is None:
                continue
            by_seq.setdefault(g.seq, []).append(g)
            if len(g.replicas) >= self.policy.slow:
                rest -= g.rids
                if not g.cert_sent:
                    g.cert_sent = True
                    msg = Msg("COMMIT_CERT", g.view, g.seq, g.state,
                              (tuple(sorted(g.replicas)), tuple(sorted(g.rids))), g.hops + 1)
                    msg.auth = self.auth.sign(self.id, msg.key())
                    self.multicast(list(range(self.n)), msg, 64 * len(g.replicas))
        for seq, gs in by_seq.items():
            proofs = [g.proof for g in gs if g.proof is not None]
            if len({p.digest for p in proofs}) > 1:
                self.conflicts += 1
                msg = Msg("POM", gs[0].view, seq, None, tuple(proofs[:2]), 0)
                self.multicast(list(range(self.n)), msg, 2 * 64)
        return rest

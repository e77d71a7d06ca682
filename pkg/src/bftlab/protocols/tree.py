"""Tree protocols: Kauri (three vote rounds) and FTB (one vote round, n = 5f-1).

The leader is the root of a fanout-d tree. Proposals and certificates travel
down the tree; votes travel up and are aggregated at every internal node.
Internal nodes wait for their children until ``child_timeout`` and then send
what they have, remembering the silent children. A root that cannot gather
n-f signers rebuilds the tree with the silent internal nodes moved to leaf
positions and proposes the unfinished instances again.
"""

from __future__ import annotations

from ..auth import Scheme
from ..engine import Msg
from . import Unreconfigurable, default_fanout, tree_layout
from .base import PREPARED, VOTED, Inst, StableReplica, adopt_unique


class TreeReplica(StableReplica):
    rounds = 1
    final_type = "CERT"
    proposal_scheme = Scheme.SIGNATURE
    relayed_types = frozenset({"RELAY", "PROPOSE"})

    def __init__(self, node_id, ctx):
        super().__init__(node_id, ctx)
        self.fanout = self.cfg.fanout or default_fanout(self.n)
        self.window = max(1, self.cfg.stretch)
        self.epoch = 0
        self.suspected: set = set()
        self.last_qc = 0
        self.reconf_backoff = 1
        self.set_layout(0, ())

    @property
    def quorum(self) -> int:
        return self.n - self.f

    def set_layout(self, epoch: int, excluded) -> None:
        self.epoch = epoch
        self.layout = tree_layout(self.n, self.fanout, excluded, root=self.leader_of(self.view))
        self.children = self.layout.children.get(self.id, ())
        self.parent = self.layout.parent.get(self.id)
        self.suspected = set()

    def on_new_view(self, view: int) -> None:
        self.last_qc = self.now
        self.set_layout(0, ())

    def round_timeout(self) -> int:
        base = 2 * self.cfg.child_timeout + 2 * self.layout.height * self.ctx.rtt
        return base * self.reconf_backoff

    # -- dissemination

    def disseminate(self, inst: Inst, msg: Msg) -> None:
        msg.extra = (self.epoch, tuple(sorted(self.layout.excluded)))
        inst.extra["epoch"] = self.epoch
        self.multicast(self.children, msg, self.payload_bytes(msg.data), self.proposal_scheme)

    def equivocate(self, seq: int, batch) -> None:
        from ..engine import Batch
        other = Batch(tuple(reversed(batch.rids)))
        kids = list(self.children)
        for dsts, b in ((kids[:1], batch), (kids[1:], other)):
            msg = Msg("PROPOSE", self.view, seq, b.digest, b, 1)
            msg.extra = (self.epoch, tuple(sorted(self.layout.excluded)))
            self.multicast(dsts, msg, self.payload_bytes(b), self.proposal_scheme)

    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        self.start_round(inst, 1)

    def on_PROPOSE(self, src: int, msg: Msg) -> None:
        if msg.view != self.view or self.in_vc or not self.in_window(msg.seq):
            return
        root = self.leader_of(msg.view)
        if msg.auth is None or msg.auth.sender != root or msg.extra is None:
            return
        epoch, excluded = msg.extra
        if epoch > self.epoch:
            try:
                self.set_layout(epoch, excluded)
            except Unreconfigurable:
                return
        elif epoch < self.epoch:
            return
        if self.parent != src:
            return
        inst = self.inst(msg.seq)
        if inst.view == msg.view and inst.extra.get("epoch") == epoch:
            return
        batch = msg.data
        if batch.digest != msg.digest:
            self.rejected += 1
            return
        if inst.committed and inst.digest != msg.digest:
            self.start_vc(self.view + 1)
            return
        self.install_proposal(inst, msg.view, batch)
        inst.extra["epoch"] = epoch
        self.watch.update(r for r in batch.rids if self.fresh(r))
        self.arm_t2()
        self.forward(msg)
        inst.mark(VOTED, inst.view)
        self.start_round(inst, 1)

    def forward(self, msg: Msg) -> None:
        if not self.children:
            return
        fwd = Msg(msg.type, msg.view, msg.seq, msg.digest, msg.data, msg.hops + 1, msg.auth)
        fwd.extra = msg.extra
        body = self.payload_bytes(msg.data) if msg.type == "PROPOSE" else 0
        self.multicast(self.children, fwd, body, None)

    # -- vote aggregation

    def vote_key(self, inst: Inst, r: int) -> tuple:
        return ("VOTE", inst.view, inst.seq, inst.digest, r)

    def start_round(self, inst: Inst, r: int) -> None:
        ex = inst.extra
        if ("mine", r) in ex:
            return
        ex[("mine", r)] = self.auth.share(self.id, self.vote_key(inst, r))
        ex[("hops", r)] = 0 if (self.is_leader and r == 1) else self.hops_in
        ex.setdefault(("votes", r), {})
        if self.is_leader:
            self.set_timer(self.round_timeout(), ("reconf", inst.seq, r, self.epoch, self.view))
            self.collect(inst, r)
            return
        if self.children and any(c not in self.suspected for c in self.children):
            self.set_timer(self.cfg.child_timeout, ("child", inst.seq, r, self.epoch, self.view))
        self.send_up(inst, r, False)

    def on_VOTE(self, src: int, msg: Msg) -> None:
        r, epoch = msg.data, msg.extra
        if msg.view != self.view or self.in_vc or epoch != self.epoch or src not in self.children:
            return
        inst = self.log.get(msg.seq)
        if inst is None or inst.batch is None or inst.extra.get("epoch") != epoch:
            return
        env = msg.auth
        if env is None or env.digest != self.vote_key(inst, r):
            return
        got = inst.extra.setdefault(("votes", r), {})
        if src in got:
            return
        got[src] = (env, msg.hops)
        self.suspected.discard(src)
        if self.is_leader:
            self.collect(inst, r)
        else:
            self.send_up(inst, r, False)

    def timer_child(self, tag) -> None:
        _, seq, r, epoch, view = tag
        inst = self.log.get(seq)
        if inst is None or view != self.view or epoch != self.epoch:
            return
        got = inst.extra.get(("votes", r), {})
        self.suspected.update(c for c in self.children if c not in got)
        self.send_up(inst, r, True)

    def send_up(self, inst: Inst, r: int, timed_out: bool) -> None:
        ex = inst.extra
        if ex.get(("sent", r)) or ("mine", r) not in ex:
            return
        got = ex.get(("votes", r), {})
        if not timed_out and any(c not in got and c not in self.suspected for c in self.children):
            return
        ex[("sent", r)] = True
        parts = [ex[("mine", r)]] + [e for e, _ in got.values()]
        hops = max([ex[("hops", r)]] + [h for _, h in got.values()]) + 1
        env = self.auth.aggregate(self.id, parts) if len(parts) > 1 else parts[0]
        msg = Msg("VOTE", inst.view, inst.seq, inst.digest, r, hops, env)
        msg.extra = self.epoch
        self.multicast([self.parent], msg, 0, None)

    def collect(self, inst: Inst, r: int) -> None:
        ex = inst.extra
        if ex.get(("qc", r)) or ("mine", r) not in ex:
            return
        got = ex.get(("votes", r), {})
        signers = {self.id}
        for env, _ in got.values():
            signers |= env.signers if env.scheme is Scheme.COMBINED else {env.sender}
        if len(signers) < self.quorum:
            return
        ex[("qc", r)] = True
        self.last_qc = self.now
        self.reconf_backoff = 1
        parts = [ex[("mine", r)]] + [e for e, _ in got.values()]
        qc = self.auth.aggregate(self.id, parts)
        hops = max([ex[("hops", r)]] + [h for _, h in got.values()]) + 1
        final = r == self.rounds
        msg = Msg(self.final_type if final else "QC", inst.view, inst.seq, inst.digest, r, hops, qc)
        msg.extra = self.epoch
        self.multicast(self.children, msg, 0, None)
        self.hops_in = hops - 1
        self.on_qc(inst, r, None)

    def _qc_ok(self, src: int, msg: Msg) -> Inst | None:
        if msg.view != self.view or self.in_vc or msg.extra != self.epoch or src != self.parent:
            return None
        inst = self.log.get(msg.seq)
        if inst is None or inst.batch is None or inst.digest != msg.digest:
            return None
        env = msg.auth
        if env is None or env.scheme is not Scheme.COMBINED or len(env.signers) < self.quorum:
            return None
        if env.digest != self.vote_key(inst, msg.data):
            return None
        return inst

    def on_QC(self, src: int, msg: Msg) -> None:
        inst = self._qc_ok(src, msg)
        if inst is not None and not inst.extra.get(("qc", msg.data)):
            inst.extra[("qc", msg.data)] = True
            self.forward(msg)
            self.on_qc(inst, msg.data, msg.hops)

    def on_CERT(self, src: int, msg: Msg) -> None:
        self.on_QC(src, msg)

    on_DECIDE = on_CERT

    def on_qc(self, inst: Inst, r: int, hops: int | None) -> None:
        if r < self.rounds:
            if r == self.rounds - 1:
                inst.mark(PREPARED, inst.view)
            self.start_round(inst, r + 1)
            return
        if hops is not None and self.layout.depth(self.id) == self.layout.height:
            self.learn(inst, hops)
        self.mark_committed(inst)
        if self.is_leader:
            self.complete(inst.seq)

    # -- reconfiguration

    def timer_reconf(self, tag) -> None:
        _, seq, r, epoch, view = tag
        inst = self.log.get(seq)
        if inst is None or view != self.view or epoch != self.epoch:
            return
        if not self.is_leader or self.in_vc or inst.extra.get(("qc", r)):
            return
        quiet = self.now - self.last_qc
        if quiet < self.round_timeout():
            # the tree is still certifying other instances
            self.set_timer(self.round_timeout() - quiet, tag)
            return
        got = inst.extra.get(("votes", r), {})
        signers = {self.id}
        for env, _ in got.values():
            signers |= env.signers if env.scheme is Scheme.COMBINED else {env.sender}
        missing = set(self.layout.order) - signers
        silent = {x for x in missing if not self.layout.is_leaf(x)}
        if not silent:
            # only leaves are late; moving them around cannot help
            self.set_timer(self.round_timeout(), tag)
            return
        excluded = set(self.layout.excluded) | silent
        if len(excluded) > self.f:
            excluded = silent
        try:
            self.set_layout(self.epoch + 1, excluded)
        except Unreconfigurable:
            self.start_vc(self.view + 1)
            return
        self.last_qc = self.now
        self.reconf_backoff = min(self.reconf_backoff * 2, 16)
        for s in sorted(self.outstanding):
            old = self.log.get(s)
            if old is None or old.batch is None or old.extra.get(("qc", self.rounds)):
                continue
            batch = old.batch
            self.install_proposal(old, self.view, batch)
            msg = Msg("PROPOSE", self.view, s, batch.digest, batch, 1)
            self.hops_in = 0
            self.disseminate(old, msg)
            self.leader_proposed(old, msg)


class KauriReplica(TreeReplica):
    rounds = 3
    final_type = "DECIDE"


class FTBReplica(TreeReplica):
    rounds = 1
    final_type = "CERT"

    def adopt(self, entries: list) -> int:
        return adopt_unique(entries, 2 * self.f, super().adopt)

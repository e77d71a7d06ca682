"""Speculative protocols: Zyzzyva, Zyzzyva5 and PoE.

Replicas execute before an instance is committed and reply with a
speculative tag. Zyzzyva commits through client-built certificates; PoE
executes once a collector certifies 2f+1 supports. Speculative prefixes
become committed at stable checkpoints.
"""

from __future__ import annotations

from ..auth import InsufficientShares, Scheme
from ..engine import Msg
from .base import COMMITTED, PREPARED, VOTED, Inst, StableReplica


class ZyzzyvaReplica(StableReplica):
    speculative = True
    proposal_scheme = Scheme.SIGNATURE

    @property
    def vc_vote_threshold(self) -> int:
        return self.f + 1

    @property
    def spec_checkpoint_quorum(self) -> int:
        return self.n

    @property
    def completion_hold(self) -> int:
        # nobody tells the leader when clients finish; release window slots
        # after roughly one client round trip
        return self.ctx.rtt + self.cfg.tau1 // 4

    @property
    def cert_size(self) -> int:
        return self.ctx.spec.reply.slow

    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        inst.extra["penv"] = msg.auth
        self.speculate(inst)

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        inst.extra["penv"] = msg.auth
        self.learn(inst, msg.hops, "fast")
        self.speculate(inst)

    def speculate(self, inst: Inst) -> None:
        inst.mark(VOTED, inst.view)
        inst.spec_ok = True
        self.try_execute()

    def after_execute(self, inst: Inst, state: int, done: dict) -> None:
        if inst.committed:
            self.send_replies(inst.view, inst.seq, state, done, inst.path)
            return
        proof = inst.extra.get("penv")
        self.send_replies(inst.view, inst.seq, state, done, "spec", Scheme.SIGNATURE,
                          extra=(proof,) if proof is not None else ())

    def on_COMMIT_CERT(self, src: int, msg: Msg) -> None:
        replicas, _rids = msg.data
        if len(set(replicas)) < self.cert_size:
            return
        # the certificate carries one signed speculative reply per replica
        self.auth._charge(self.id, "verify", self.auth.costs.verify, len(replicas))
        h = self.history.get(msg.seq)
        if h is None or h[2] != msg.digest:
            return
        # matching history at seq fixes the whole prefix
        for s in range(self.low + 1, msg.seq + 1):
            inst = self.log.get(s)
            if inst is None or not inst.executed or inst.committed:
                continue
            inst.committed = True
            inst.path = "slow"
            inst.mark(COMMITTED, inst.view)
            self.record_commit(s)
        self.rec.learn(msg.seq, msg.hops, "slow")
        ack = self.out("ACK", self.view, msg.seq, msg.digest)
        ack.auth = self.auth.mac(self.id, ack.key(), [src])
        self.emit(src, ack)

    def on_POM(self, src: int, msg: Msg) -> None:
        a, b = msg.data
        if a.sender != b.sender or a.digest == b.digest:
            return
        if a.digest[0] != "PROPOSE" or a.digest[:3] != b.digest[:3]:
            return
        view = a.digest[1]
        if a.sender != self.leader_of(view) or view != self.view:
            return
        if self.auth.verify(self.id, a) and self.auth.verify(self.id, b):
            self.start_vc(self.view + 1)


class Zyzzyva5Replica(ZyzzyvaReplica):
    @property
    def vc_vote_threshold(self) -> int:
        return 2 * self.f + 1

    @property
    def spec_checkpoint_quorum(self) -> int:
        return self.n - self.f


class PoEReplica(StableReplica):
    speculative = True
    proposal_scheme = Scheme.SIGNATURE

    @property
    def spec_checkpoint_quorum(self) -> int:
        return self.n - self.f

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        env = self.auth.share(self.id, ("SUPPORT", inst.view, inst.seq, inst.digest))
        self.support(inst, self.id, env, 1)

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        out = self.out("SUPPORT", inst.view, inst.seq, inst.digest)
        self.multicast([self.leader], out, 0, Scheme.SHARE)

    def on_SUPPORT(self, src: int, msg: Msg) -> None:
        if not self.is_leader or msg.view != self.view or self.in_vc:
            return
        if not self.in_window(msg.seq):
            return
        self.support(self.inst(msg.seq), src, msg.auth, msg.hops)

    def support(self, inst: Inst, src: int, env, hops: int) -> None:
        trk = inst.tracker(("support", self.view), self.quorum)
        trk.add(src, env.digest, hops, env)
        want = ("SUPPORT", inst.view, inst.seq, inst.digest)
        if inst.batch is None or inst.extra.get("certified") or trk.count(want) < self.quorum:
            return
        try:
            cert = self.auth.combine(self.id, trk.items[want], self.quorum)
        except InsufficientShares:
            return
        inst.extra["certified"] = True
        msg = Msg("CERTIFY", inst.view, inst.seq, inst.digest, None, trk.hops[want] + 1, cert)
        self.multicast(self.others, msg, 0, None)
        self.certified(inst, msg.hops)
        self.complete(inst.seq)

    def on_CERTIFY(self, src: int, msg: Msg) -> None:
        if src != self.leader_of(msg.view) or msg.view != self.view or self.in_vc:
            return
        env = msg.auth
        if env is None or env.scheme is not Scheme.COMBINED or env.threshold < self.quorum:
            return
        if env.digest != ("SUPPORT", msg.view, msg.seq, msg.digest) or not self.in_window(msg.seq):
            return
        inst = self.inst(msg.seq)
        if inst.batch is None or inst.digest != msg.digest or inst.view != msg.view:
            return
        self.certified(inst, msg.hops)

    def certified(self, inst: Inst, hops: int) -> None:
        inst.cert = True
        inst.mark(PREPARED, inst.view)
        inst.spec_ok = True
        self.learn(inst, hops, "fast")
        self.try_execute()

"""Collector-based protocols with linear good-case traffic: SBFT and FLB."""

from __future__ import annotations

from ..auth import InsufficientShares, Scheme
from ..engine import Msg
from .base import PREPARED, VOTED, Inst, StableReplica, adopt_unique


class SBFTReplica(StableReplica):
    """Fast path needs all n sign shares; after tau3 the collector falls back
    to a prepare proof plus a commit proof from 2f+1 shares each."""

    proposal_scheme = Scheme.SIGNATURE

    @property
    def vc_vote_threshold(self) -> int:
        return self.f + 1

    @property
    def slow_quorum(self) -> int:
        return 2 * self.f + 1

    def _share_key(self, kind: str, inst: Inst) -> tuple:
        return (kind, inst.view, inst.seq, inst.digest)

    # -- fast path

    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        self.set_timer(self.cfg.tau3, ("t3", inst.seq, inst.view))
        env = self.auth.share(self.id, self._share_key("SIGN_SHARE", inst))
        self.sign_share(inst, self.id, env, 1)

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        out = self.out("SIGN_SHARE", inst.view, inst.seq, inst.digest)
        self.multicast([self.leader], out, 0, Scheme.SHARE)

    def _collecting(self, msg: Msg) -> Inst | None:
        if not self.is_leader or msg.view != self.view or self.in_vc:
            return None
        if not self.in_window(msg.seq):
            return None
        return self.inst(msg.seq)

    def on_SIGN_SHARE(self, src: int, msg: Msg) -> None:
        inst = self._collecting(msg)
        if inst is not None:
            self.sign_share(inst, src, msg.auth, msg.hops)

    def sign_share(self, inst: Inst, src: int, env, hops: int) -> None:
        trk = inst.tracker(("sign", self.view), self.n)
        trk.add(src, env.digest, hops, env)
        if inst.batch is None or inst.extra.get("proof") or inst.extra.get("slow"):
            return
        want = self._share_key("SIGN_SHARE", inst)
        count = trk.count(want)
        if count >= self.n:
            cert = self.auth.combine(self.id, trk.items[want], self.n)
            self.send_proof("FULL_PROOF", inst, cert, trk.hops[want] + 1)
            self.full_proof(inst, None)
        elif inst.extra.get("t3") and count >= self.slow_quorum:
            self.start_slow(inst, trk, want)

    def timer_t3(self, tag) -> None:
        _, seq, view = tag
        inst = self.log.get(seq)
        if inst is None or view != self.view or inst.view != view or not self.is_leader:
            return
        inst.extra["t3"] = True
        if inst.extra.get("proof") or inst.extra.get("slow"):
            return
        trk = inst.trk.get(("sign", view))
        want = self._share_key("SIGN_SHARE", inst)
        if trk is not None and trk.count(want) >= self.slow_quorum:
            self.start_slow(inst, trk, want)

    def send_proof(self, type: str, inst: Inst, cert, hops: int) -> None:
        msg = Msg(type, inst.view, inst.seq, inst.digest, None, hops, cert)
        self.multicast(self.others, msg, 0, None)

    def _proof_ok(self, src: int, msg: Msg, kind: str, threshold: int) -> Inst | None:
        env = msg.auth
        if src != self.leader_of(msg.view) or msg.view != self.view or self.in_vc:
            return None
        if env is None or env.scheme is not Scheme.COMBINED or env.threshold < threshold:
            return None
        if env.digest != (kind, msg.view, msg.seq, msg.digest) or not self.in_window(msg.seq):
            return None
        inst = self.inst(msg.seq)
        if inst.batch is None or inst.digest != msg.digest or inst.view != msg.view:
            return None
        return inst

    def on_FULL_PROOF(self, src: int, msg: Msg) -> None:
        inst = self._proof_ok(src, msg, "SIGN_SHARE", self.n)
        if inst is not None:
            self.full_proof(inst, msg.hops)

    def full_proof(self, inst: Inst, hops: int | None) -> None:
        if inst.extra.get("proof"):
            return
        inst.extra["proof"] = True
        if hops is not None:
            self.learn(inst, hops)
        self.mark_committed(inst)
        if self.is_leader:
            self.complete(inst.seq)

    # -- slow path

    def start_slow(self, inst: Inst, trk, want: tuple) -> None:
        cert = self.auth.combine(self.id, trk.items[want][: self.slow_quorum], self.slow_quorum)
        self.send_proof("PREPARE_PROOF", inst, cert, trk.hops[want] + 1)
        self.prepare_proof(inst, trk.hops[want] + 1)

    def on_PREPARE_PROOF(self, src: int, msg: Msg) -> None:
        inst = self._proof_ok(src, msg, "SIGN_SHARE", self.slow_quorum)
        if inst is not None:
            self.prepare_proof(inst, msg.hops)

    def prepare_proof(self, inst: Inst, hops: int) -> None:
        if inst.extra.get("slow") or inst.extra.get("proof"):
            return
        inst.extra["slow"] = True
        inst.path = "slow"
        inst.mark(PREPARED, inst.view)
        if self.is_leader:
            env = self.auth.share(self.id, self._share_key("COMMIT_SHARE", inst))
            self.commit_share(inst, self.id, env, hops)
        else:
            out = self.out("COMMIT_SHARE", inst.view, inst.seq, inst.digest, hops=hops + 1)
            self.multicast([self.leader], out, 0, Scheme.SHARE)

    def on_COMMIT_SHARE(self, src: int, msg: Msg) -> None:
        inst = self._collecting(msg)
        if inst is not None:
            self.commit_share(inst, src, msg.auth, msg.hops)

    def commit_share(self, inst: Inst, src: int, env, hops: int) -> None:
        trk = inst.tracker(("commit", self.view), self.slow_quorum)
        trk.add(src, env.digest, hops, env)
        want = self._share_key("COMMIT_SHARE", inst)
        if inst.extra.get("proof") or trk.count(want) < self.slow_quorum:
            return
        cert = self.auth.combine(self.id, trk.items[want], self.slow_quorum)
        self.send_proof("COMMIT_PROOF", inst, cert, trk.hops[want] + 1)
        self.full_proof(inst, None)

    def on_COMMIT_PROOF(self, src: int, msg: Msg) -> None:
        inst = self._proof_ok(src, msg, "COMMIT_SHARE", self.slow_quorum)
        if inst is not None:
            inst.path = "slow"
            self.full_proof(inst, msg.hops)

    # -- execution: f+1 result shares become one combined reply

    def after_execute(self, inst: Inst, state: int, done: dict) -> None:
        for machine, rids in done.items():
            for rid in rids:
                self.reply_cache[(rid[0], rid[1])] = (rid[2], inst.view, inst.seq, state, inst.path)
        key = ("EXEC_SHARE", inst.view, inst.seq, state)
        if self.is_leader:
            inst.extra["done"] = (state, done)
            self.exec_share(inst, self.id, self.auth.share(self.id, key))
        else:
            out = self.out("EXEC_SHARE", inst.view, inst.seq, state)
            self.multicast([self.leader], out, 0, Scheme.SHARE)

    def on_EXEC_SHARE(self, src: int, msg: Msg) -> None:
        if not self.is_leader or msg.view != self.view:
            return
        inst = self.log.get(msg.seq)
        if inst is not None:
            self.exec_share(inst, src, msg.auth)

    def exec_share(self, inst: Inst, src: int, env) -> None:
        trk = inst.tracker("exec", self.f + 1)
        trk.add(src, env.digest, 0, env)
        mine = inst.extra.get("done")
        if mine is None or inst.extra.get("replied"):
            return
        state, done = mine
        want = ("EXEC_SHARE", inst.view, inst.seq, state)
        if trk.count(want) < self.f + 1:
            return
        try:
            cert = self.auth.combine(self.id, trk.items[want], self.f + 1)
        except InsufficientShares:
            return
        inst.extra["replied"] = True
        for machine, rids in done.items():
            self.reply(machine, inst.view, inst.seq, state, tuple(rids), inst.path, env=cert)


class FLBReplica(StableReplica):
    """Two-phase protocol at n = 5f-1: the leader gathers n-f signed votes,
    commits, and ships the certificate on its next proposal."""

    proposal_scheme = Scheme.SIGNATURE

    def __init__(self, node_id, ctx):
        super().__init__(node_id, ctx)
        self.pending_certs: list = []
        self.cert_timer = None

    @property
    def quorum(self) -> int:
        return self.n - self.f

    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        env = self.auth.sign(self.id, ("VOTE", inst.view, inst.seq, inst.digest))
        self.vote(inst, self.id, env, 1)

    def disseminate(self, inst: Inst, msg: Msg) -> None:
        body = self.payload_bytes(msg.data)
        if self.pending_certs:
            msg.extra = tuple(self.pending_certs)
            body += sum(self.cert_bytes(c) for c in msg.extra)
            self.pending_certs = []
        self.multicast(self.others, msg, body, self.proposal_scheme)

    def cert_bytes(self, cert: tuple) -> int:
        return 24 + self.auth.sizes.signature * len(cert[3])

    def on_PROPOSE(self, src: int, msg: Msg) -> None:
        if msg.extra and src == self.leader_of(msg.view):
            self.apply_certs(msg.extra)
        super().on_PROPOSE(src, msg)

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        out = self.out("VOTE", inst.view, inst.seq, inst.digest)
        self.multicast([self.leader], out, 0, Scheme.SIGNATURE)

    def on_VOTE(self, src: int, msg: Msg) -> None:
        if not self.is_leader or msg.view != self.view or self.in_vc or not self.in_window(msg.seq):
            return
        self.vote(self.inst(msg.seq), src, msg.auth, msg.hops)

    def vote(self, inst: Inst, src: int, env, hops: int) -> None:
        trk = inst.tracker(("vote", self.view), self.quorum)
        trk.add(src, env.digest, hops, env)
        want = ("VOTE", inst.view, inst.seq, inst.digest)
        if inst.batch is None or inst.cert is not None or trk.count(want) < self.quorum:
            return
        inst.cert = tuple(trk.items[want][: self.quorum])
        self.learn(inst, trk.hops[want])
        self.mark_committed(inst)
        self.pending_certs.append((inst.seq, inst.view, inst.digest, inst.cert))
        if self.cert_timer is None:
            self.cert_timer = self.set_timer(2 * self.cfg.batch_timeout, ("cert",))
        self.complete(inst.seq)

    def timer_cert(self, tag) -> None:
        self.cert_timer = None
        if not self.pending_certs or not self.is_leader:
            self.pending_certs = []
            return
        certs = tuple(self.pending_certs)
        self.pending_certs = []
        msg = self.out("CERT", self.view, 0, None, certs)
        self.multicast(self.others, msg, sum(self.cert_bytes(c) for c in certs), Scheme.MAC_VECTOR)

    def on_CERT(self, src: int, msg: Msg) -> None:
        if src == self.leader_of(msg.view):
            self.apply_certs(msg.data)

    def apply_certs(self, certs: tuple) -> None:
        for seq, view, digest, sigs in certs:
            inst = self.log.get(seq)
            if inst is None or inst.committed or inst.digest != digest:
                continue
            want = ("VOTE", view, seq, digest)
            signers = {e.sender for e in sigs if e.digest == want}
            if len(signers) < self.quorum:
                continue
            if not all(self.auth.verify(self.id, e) for e in sigs):
                continue
            inst.cert = sigs
            self.mark_committed(inst)

    def adopt(self, entries: list) -> int:
        return adopt_unique(entries, 2 * self.f, super().adopt)

    def on_new_view(self, view: int) -> None:
        self.pending_certs = []

"""Clique protocols: PBFT (three phases) and FaB (two phases, 5f+1)."""

from __future__ import annotations

from ..engine import Msg
from .base import PREPARED, VOTED, Inst, StableReplica


class PBFTReplica(StableReplica):
    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        self.multicast(self.others, self.out("PREPARE", inst.view, inst.seq, inst.digest, hops=1))

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        inst.mark(VOTED, inst.view)
        self.multicast(self.others, self.out("PREPARE", inst.view, inst.seq, inst.digest))
        self.check_prepared(inst)

    def _current(self, msg: Msg) -> Inst | None:
        if msg.view != self.view or self.in_vc or not self.in_window(msg.seq):
            return None
        return self.inst(msg.seq)

    def on_PREPARE(self, src: int, msg: Msg) -> None:
        inst = self._current(msg)
        if inst is None:
            return
        inst.tracker(("prepare", msg.view), 2 * self.f).add(src, msg.digest, msg.hops)
        self.check_prepared(inst)

    def check_prepared(self, inst: Inst) -> None:
        if inst.batch is None or inst.view != self.view or inst.extra.get("prepared"):
            return
        trk = inst.trk.get(("prepare", inst.view))
        if trk is None or trk.count(inst.digest) < 2 * self.f:
            return
        inst.extra["prepared"] = True
        inst.mark(PREPARED, inst.view)
        hops = trk.hops[inst.digest] + 1
        self.multicast(self.others, self.out("COMMIT", inst.view, inst.seq, inst.digest, hops=hops))
        inst.tracker(("commit", inst.view), 2 * self.f + 1).add(self.id, inst.digest, hops)
        self.check_committed(inst)

    def on_COMMIT(self, src: int, msg: Msg) -> None:
        inst = self._current(msg)
        if inst is None:
            return
        inst.tracker(("commit", msg.view), 2 * self.f + 1).add(src, msg.digest, msg.hops)
        self.check_committed(inst)

    def check_committed(self, inst: Inst) -> None:
        if not inst.extra.get("prepared") or inst.extra.get("done"):
            return
        trk = inst.trk.get(("commit", inst.view))
        if trk is None or trk.count(inst.digest) < 2 * self.f + 1:
            return
        inst.extra["done"] = True
        self.learn(inst, trk.hops[inst.digest])
        self.mark_committed(inst)
        if self.is_leader:
            self.complete(inst.seq)


class FaBReplica(StableReplica):
    @property
    def vc_vote_threshold(self) -> int:
        return 2 * self.f + 1

    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        self.vote(inst, 1)

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        self.vote(inst, msg.hops + 1)

    def vote(self, inst: Inst, hops: int) -> None:
        inst.mark(VOTED, inst.view)
        self.multicast(self.others, self.out("ACCEPT", inst.view, inst.seq, inst.digest, hops=hops))
        inst.tracker(("accept", inst.view), 4 * self.f + 1).add(self.id, inst.digest, hops)
        self.check_accepted(inst)

    def on_ACCEPT(self, src: int, msg: Msg) -> None:
        if msg.view != self.view or self.in_vc or not self.in_window(msg.seq):
            return
        inst = self.inst(msg.seq)
        inst.tracker(("accept", msg.view), 4 * self.f + 1).add(src, msg.digest, msg.hops)
        self.check_accepted(inst)

    def check_accepted(self, inst: Inst) -> None:
        if inst.batch is None or inst.view != self.view or inst.extra.get("done"):
            return
        trk = inst.trk.get(("accept", inst.view))
        if trk is None or trk.count(inst.digest) < 4 * self.f + 1:
            return
        inst.extra["done"] = True
        self.learn(inst, trk.hops[inst.digest])
        self.mark_committed(inst)
        if self.is_leader:
            self.complete(inst.seq)

"""Stable-leader replica: pooling, batching, window, execution, checkpoints,
state transfer and a generic view change with protocol-specific adoption."""

from __future__ import annotations

from typing import Any

from ..auth import Scheme
from ..engine import NULL_BATCH, Batch, Context, Msg, QuorumTracker, ReplicaBase

# report kinds carried in view-change messages, strongest first
COMMITTED, PREPARED, VOTED = "C", "P", "V"
_RANK = {COMMITTED: 3, PREPARED: 2, VOTED: 1}


def adopt_unique(entries: list, threshold: int, fallback) -> int:
    """Committed digest, else the only digest voted in the highest view, else
    one with ``threshold`` votes there, else ``fallback([])``."""
    for view, digest, kind in entries:
        if kind == COMMITTED:
            return digest
    if entries:
        top = max(view for view, _, _ in entries)
        counts: dict = {}
        for view, digest, _ in entries:
            if view == top:
                counts[digest] = counts.get(digest, 0) + 1
        if len(counts) == 1:
            return next(iter(counts))
        best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
        if best[1] >= threshold:
            return best[0]
    return fallback([])


class Inst:
    __slots__ = ("seq", "view", "digest", "batch", "trk", "committed", "recorded",
                 "executed", "spec_ok", "kind", "kind_view", "cert", "path", "extra")

    def __init__(self, seq: int):
        self.seq = seq
        self.view = -1
        self.digest = None
        self.batch: Batch | None = None
        self.trk: dict = {}
        self.committed = False
        self.recorded = False
        self.executed = False
        self.spec_ok = False
        self.kind = None
        self.kind_view = -1
        self.cert = None
        self.path = "fast"
        self.extra: dict = {}

    def tracker(self, name: str, threshold: int) -> QuorumTracker:
        t = self.trk.get(name)
        if t is None:
            t = self.trk[name] = QuorumTracker(threshold)
        return t

    def mark(self, kind: str, view: int) -> None:
        """Keep the strongest evidence; among equals, the latest view."""
        if self.kind is None or (_RANK[kind], view) > (_RANK[self.kind], self.kind_view):
            self.kind, self.kind_view = kind, view


class StableReplica(ReplicaBase):
    speculative = False
    proposal_scheme = Scheme.MAC_VECTOR
    # votes needed in the highest reported view to adopt an uncertified digest
    vc_vote_threshold: int | None = None
    # matching checkpoints that make a speculative prefix stable
    spec_checkpoint_quorum: int | None = None
    # leaders that learn nothing after proposing hold instances for this long
    completion_hold: int | None = None
    carries_payload = True

    def __init__(self, node_id: int, ctx: Context):
        super().__init__(node_id, ctx)
        self.view = 0
        self.in_vc = False
        self.vc_target = 0
        self.log: dict[int, Inst] = {}
        self.pool: dict = {}
        self.inflight: set = set()
        self.outstanding: set = set()
        self.next_seq = 1
        self.low = 0
        self.low_state = 0
        self.batch_timer = None
        self.batch_due = False
        self.t2 = None
        self.t2_backoff = 1
        self.watch: set = set()
        self.checkpoints: dict = {}
        self.history: dict = {}
        self.vcs: dict = {}
        self.nv_sent: set = set()
        self.pending_transfer = None
        self.commit_floor = 0
        self.unflagged: set = set()
        self.window = self.cfg.window if "O1" in ctx.spec.descriptor.optimizations else 1

    # -- roles

    def leader_of(self, view: int) -> int:
        return view % self.n

    @property
    def leader(self) -> int:
        return self.leader_of(self.view)

    @property
    def is_leader(self) -> bool:
        return self.leader == self.id

    def inst(self, seq: int) -> Inst:
        i = self.log.get(seq)
        if i is None:
            i = self.log[seq] = Inst(seq)
        return i

    def in_window(self, seq: int) -> bool:
        return self.low < seq <= self.low + self.cfg.watermark

    # -- client requests

    def on_message(self, src: int, msg: Msg) -> None:
        if msg.type in ("REQUEST", "RELAY") and self.all_known(msg.data):
            # duplicate of requests already pending here: a digest lookup
            # rejects it before any signature check
            self.charge(self.cfg.recv_cost + self._kb(msg.size))
            return
        super().on_message(src, msg)

    def all_known(self, rids) -> bool:
        return all(self.fresh(r) and (r in self.pool or r in self.inflight) for r in rids)

    def on_REQUEST(self, src: int, msg: Msg) -> None:
        rids = self.resend_replies(msg.data)
        if not rids:
            return
        self.add_requests(rids)
        if not self.is_leader and not self.in_vc:
            relay = Msg("RELAY", self.view, 0, None, tuple(rids), msg.hops)
            relay.auth = msg.auth
            self.emit(self.leader, relay, self.request_body(relay.data))
            self.watch.update(rids)
            self.arm_t2()

    def on_RELAY(self, src: int, msg: Msg) -> None:
        self.add_requests([r for r in msg.data if self.fresh(r)])

    def add_requests(self, rids) -> None:
        for rid in rids:
            if rid not in self.inflight:
                self.pool[rid] = None
        if self.is_leader:
            self.maybe_propose()

    # -- proposing

    def in_flight(self) -> int:
        return len(self.outstanding)

    def maybe_propose(self) -> None:
        if not self.is_leader or self.in_vc:
            return
        cfg = self.cfg
        while self.pool:
            if self.next_seq > self.low + cfg.watermark:
                break
            if self.in_flight() >= self.window:
                break
            if len(self.pool) < cfg.batch_size and self.in_flight() > 0 and not self.batch_due:
                break
            if self.equivocator and len(self.pool) < 2:
                break
            rids = []
            for rid in self.pool:
                rids.append(rid)
                if len(rids) >= cfg.batch_size:
                    break
            for rid in rids:
                del self.pool[rid]
            self.batch_due = False
            self.propose(self.next_seq, Batch(rids))
            self.next_seq += 1
        if self.pool and self.batch_timer is None:
            self.batch_timer = self.set_timer(cfg.batch_timeout, ("batch",))

    def timer_batch(self, tag) -> None:
        self.batch_timer = None
        if self.pool:
            self.batch_due = True
            self.maybe_propose()

    def propose(self, seq: int, batch: Batch) -> None:
        self.outstanding.add(seq)
        self.inflight.update(batch.rids)
        if self.equivocator:
            self.equivocate(seq, batch)
            return
        inst = self.inst(seq)
        self.install_proposal(inst, self.view, batch)
        msg = Msg("PROPOSE", self.view, seq, batch.digest, batch, 1)
        self.disseminate(inst, msg)
        self.leader_proposed(inst, msg)
        if self.completion_hold is not None:
            self.set_timer(self.completion_hold, ("hold", seq))

    def payload_bytes(self, batch: Batch) -> int:
        per = self.cfg.request_size if self.carries_payload else self.cfg.rid_size
        return per * len(batch)

    def disseminate(self, inst: Inst, msg: Msg) -> None:
        self.multicast(self.others, msg, self.payload_bytes(msg.data), self.proposal_scheme)

    def equivocate(self, seq: int, batch: Batch) -> None:
        other = Batch(tuple(reversed(batch.rids)))
        half = len(self.others) // 2
        for dsts, b in ((self.others[:half], batch), (self.others[half:], other)):
            self.multicast(dsts, Msg("PROPOSE", self.view, seq, b.digest, b, 1),
                           self.payload_bytes(b), self.proposal_scheme)

    def timer_hold(self, tag) -> None:
        self.complete(tag[1])

    def complete(self, seq: int) -> None:
        if seq in self.outstanding:
            self.outstanding.discard(seq)
            self.maybe_propose()

    # -- accepting proposals

    def on_PROPOSE(self, src: int, msg: Msg) -> None:
        if src != self.leader_of(msg.view) or msg.view != self.view or self.in_vc:
            return
        if not self.in_window(msg.seq):
            return
        inst = self.inst(msg.seq)
        if inst.view == msg.view:
            return
        batch: Batch = msg.data
        if batch.digest != msg.digest or (not batch.rids and msg.digest != NULL_BATCH.digest):
            self.rejected += 1
            return
        if inst.committed and inst.digest != msg.digest:
            # a proposal contradicting a held commit certificate
            self.start_vc(self.view + 1)
            return
        self.install_proposal(inst, msg.view, batch)
        self.watch.update(r for r in batch.rids if self.fresh(r))
        self.arm_t2()
        self.accept_proposal(inst, msg)

    def install_proposal(self, inst: Inst, view: int, batch: Batch) -> None:
        if inst.digest != batch.digest:
            inst.kind, inst.kind_view = None, -1
            inst.committed = False
        inst.view = view
        inst.digest = batch.digest
        inst.batch = batch
        inst.cert = None
        inst.path = "fast"
        inst.extra = {}
        if not inst.committed:
            inst.spec_ok = False

    # protocol hooks
    def leader_proposed(self, inst: Inst, msg: Msg) -> None:
        pass

    def accept_proposal(self, inst: Inst, msg: Msg) -> None:
        raise NotImplementedError

    # -- commit and execution

    def learn(self, inst: Inst, hops: int | None = None, path: str | None = None) -> None:
        self.rec.learn(inst.seq, self.hops_in if hops is None else hops, path or inst.path)

    def mark_committed(self, inst: Inst) -> None:
        if inst.committed:
            return
        inst.committed = True
        inst.mark(COMMITTED, inst.view)
        if inst.executed:
            self.record_commit(inst.seq)
        self.try_execute()

    def record_commit(self, seq: int) -> None:
        h = self.history.get(seq)
        if h is None:
            return
        inst = self.log.get(seq)
        if inst is not None:
            inst.recorded = True
        self.rec.commit(self.id, seq, h[0], h[2], h[1].rids)
        self.advance_commit_floor()

    def advance_commit_floor(self) -> None:
        s = max(self.commit_floor, self.low)
        while True:
            inst = self.log.get(s + 1)
            if inst is None or not inst.recorded:
                break
            s += 1
        self.commit_floor = s
        if self.unflagged and min(self.unflagged) <= s:
            for cp in sorted(c for c in self.unflagged if c <= s):
                self.unflagged.discard(cp)
                if cp > self.low and cp in self.history:
                    self.send_checkpoint(cp)

    def ready(self, inst: Inst) -> bool:
        return inst.committed or (self.speculative and inst.spec_ok)

    def try_execute(self) -> None:
        progressed = False
        while True:
            inst = self.log.get(self.exec_seq + 1)
            if inst is None or inst.executed or inst.batch is None or not self.ready(inst):
                break
            self.execute(inst)
            progressed = True
        if progressed:
            self.t2_backoff = 1
            self.arm_t2(restart=True)
            if self.is_leader:
                self.maybe_propose()

    def execute(self, inst: Inst) -> None:
        batch = inst.batch
        undo = [(k, self.executed_num.get(k, 0)) for k in {(r[0], r[1]) for r in batch.rids}]
        state, done = self.apply_batch(inst.seq, batch)
        self.history[inst.seq] = (inst.digest, batch, state, undo, inst.view)
        inst.executed = True
        for rid in batch.rids:
            self.pool.pop(rid, None)
            self.inflight.discard(rid)
            self.watch.discard(rid)
        if inst.committed:
            self.record_commit(inst.seq)
        self.after_execute(inst, state, done)
        if inst.seq % self.cfg.checkpoint_interval == 0:
            self.send_checkpoint(inst.seq)

    def after_execute(self, inst: Inst, state: int, done: dict) -> None:
        path = "spec" if self.speculative and not inst.committed else inst.path
        self.send_replies(inst.view, inst.seq, state, done, path)

    def rollback(self, to: int) -> None:
        if self.exec_seq <= to:
            return
        for seq in range(self.exec_seq, to, -1):
            digest, batch, _state, undo, _view = self.history.pop(seq)
            for key, num in undo:
                if num:
                    self.executed_num[key] = num
                else:
                    self.executed_num.pop(key, None)
            inst = self.log.get(seq)
            if inst is not None:
                inst.executed = False
                inst.recorded = False
            for (m, c), _num in undo:
                self.reply_cache.pop((m, c), None)
        self.exec_seq = to
        self.state = self.history[to][2] if to in self.history else self.low_state
        self.rec.rollback(self.id, to)

    # -- suspicion timer

    def arm_t2(self, restart: bool = False) -> None:
        if self.is_leader and not self.in_vc:
            return
        if restart and self.t2 is not None and not self.in_vc:
            self.cancel_timer(self.t2)
            self.t2 = None
        if self.t2 is None and (self.watch or self.in_vc):
            self.t2 = self.set_timer(self.cfg.tau2 * self.t2_backoff, ("t2",))

    def timer_t2(self, tag) -> None:
        self.t2 = None
        if self.in_vc:
            self.start_vc(self.vc_target + 1)
        elif self.watch:
            self.start_vc(self.view + 1)

    # -- checkpoints and state transfer

    def send_checkpoint(self, seq: int) -> None:
        flag = self.commit_floor >= seq
        if not flag:
            self.unflagged.add(seq)
        state = self.history[seq][2]
        msg = self.out("CHECKPOINT", self.view, seq, state, flag)
        self.multicast(self.others, msg, 0, Scheme.SIGNATURE)
        self.note_checkpoint(self.id, seq, state, flag)

    def on_CHECKPOINT(self, src: int, msg: Msg) -> None:
        self.note_checkpoint(src, msg.seq, msg.digest, msg.data)

    def note_checkpoint(self, src: int, seq: int, state: int, flag: bool) -> None:
        if seq <= self.low:
            return
        votes = self.checkpoints.setdefault(seq, {}).setdefault(state, {})
        votes[src] = flag
        flagged = sum(votes.values())
        stable = flagged >= 2 * self.f + 1
        if self.speculative and self.spec_checkpoint_quorum is not None:
            stable = stable or len(votes) >= self.spec_checkpoint_quorum
        if stable:
            self.make_stable(seq, state, list(votes))

    def make_stable(self, seq: int, state: int, holders: list) -> None:
        if seq <= self.low:
            return
        if self.exec_seq >= seq:
            if self.history[seq][2] != state:
                self.rec._violate("agreement", f"replica {self.id} checkpoint {seq} diverges")
                return
            for s in range(self.low + 1, seq + 1):
                inst = self.log.get(s)
                if s in self.history and (inst is None or not inst.recorded):
                    if inst is not None:
                        inst.committed = True
                    self.record_commit(s)
            self.advance_low(seq, state)
        else:
            self.request_state(seq, state, holders)

    def advance_low(self, seq: int, state: int) -> None:
        self.low, self.low_state = seq, state
        self.commit_floor = max(self.commit_floor, seq)
        self.unflagged = {c for c in self.unflagged if c > seq}
        for s in [s for s in self.log if s <= seq]:
            del self.log[s]
        for s in [s for s in self.checkpoints if s <= seq]:
            del self.checkpoints[s]
        keep = seq - self.cfg.watermark
        for s in [s for s in self.history if s < keep]:
            del self.history[s]
        for s in [s for s in self.outstanding if s <= seq]:
            self.outstanding.discard(s)
        if self.is_leader:
            self.maybe_propose()

    def request_state(self, seq: int, state: int, holders: list) -> None:
        if self.pending_transfer is not None and self.pending_transfer[0] >= seq:
            return
        self.pending_transfer = (seq, state)
        msg = self.out("FETCH", self.view, seq, state, self.exec_seq)
        self.multicast([h for h in holders if h != self.id][: self.f + 1], msg, 0, Scheme.MAC_VECTOR)

    def on_FETCH(self, src: int, msg: Msg) -> None:
        start, seq = msg.data, msg.seq
        if self.exec_seq < seq or any(s not in self.history for s in range(start + 1, seq + 1)):
            return
        if self.history[seq][2] != msg.digest:
            return
        entries = tuple((s, self.history[s][1]) for s in range(start + 1, seq + 1))
        body = sum(self.payload_bytes(b) for _, b in entries)
        self.multicast([src], self.out("STATE", self.view, seq, msg.digest, (start, entries)),
                       body, Scheme.SIGNATURE)

    def on_STATE(self, src: int, msg: Msg) -> None:
        want = self.pending_transfer
        if want is None or msg.seq != want[0] or msg.digest != want[1]:
            return
        start, entries = msg.data
        if start > self.exec_seq:
            return
        # discard our own speculative suffix if it diverges from the stable prefix
        for s, batch in entries:
            if s <= self.exec_seq and self.history[s][0] != batch.digest:
                self.rollback(s - 1)
                break
        for s, batch in entries:
            if s <= self.exec_seq:
                continue
            inst = self.inst(s)
            if not (inst.batch is not None and inst.digest == batch.digest):
                self.install_proposal(inst, inst.view, batch)
            inst.committed = True
            self.execute(inst)
        self.pending_transfer = None
        if self.history.get(msg.seq, (None, None, None))[2] == msg.digest:
            self.make_stable(msg.seq, msg.digest, [])
        self.try_execute()

    # -- view change

    def report(self) -> tuple:
        out = []
        bodies = {}
        for s in sorted(self.log):
            inst = self.log[s]
            if s <= self.low or inst.kind is None or inst.batch is None:
                continue
            out.append((s, inst.kind_view, inst.digest, inst.kind))
            bodies[inst.digest] = inst.batch
        return tuple(out), bodies

    def start_vc(self, view: int) -> None:
        if view <= self.view or (self.in_vc and self.vc_target >= view):
            return
        self.in_vc = True
        self.vc_target = view
        if self.batch_timer is not None:
            self.cancel_timer(self.batch_timer)
            self.batch_timer = None
        reports, bodies = self.report()
        data = (self.low, self.low_state, reports, bodies)
        msg = self.out("VC", view, self.low, None, data)
        body = 48 * len(reports) + sum(self.payload_bytes(b) for b in bodies.values())
        self.multicast(self.others, msg, body, Scheme.SIGNATURE)
        self.vcs.setdefault(view, {})[self.id] = msg
        if self.t2 is not None:
            self.cancel_timer(self.t2)
            self.t2 = None
        self.t2_backoff *= 2
        self.t2 = self.set_timer(self.cfg.tau2 * self.t2_backoff, ("t2",))
        self.check_new_view(view)

    def on_VC(self, src: int, msg: Msg) -> None:
        view = msg.view
        if view <= self.view:
            return
        self.vcs.setdefault(view, {})[src] = msg
        if len(self.vcs[view]) >= self.f + 1 and (not self.in_vc or self.vc_target < view):
            self.start_vc(view)
        self.check_new_view(view)

    def check_new_view(self, view: int) -> None:
        if self.leader_of(view) != self.id or view in self.nv_sent or self.equivocator:
            return
        vcs = self.vcs.get(view, {})
        if len(vcs) < self.n - self.f or not (self.in_vc and self.vc_target == view):
            return
        self.nv_sent.add(view)
        chosen_vcs = tuple(vcs[s] for s in sorted(vcs)[: self.n - self.f])
        base, base_state, chosen, bodies = self.compute_new_view(chosen_vcs)
        msg = self.out("NEW_VIEW", view, base, base_state, (chosen_vcs, chosen))
        body = sum(m.size for m in chosen_vcs) + 48 * len(chosen)
        self.multicast(self.others, msg, body, Scheme.SIGNATURE)
        self.install_view(view, base, base_state, chosen, bodies, chosen_vcs)

    def compute_new_view(self, vcs) -> tuple:
        base, base_state = 0, 0
        for m in vcs:
            if m.data[0] > base:
                base, base_state = m.data[0], m.data[1]
        bodies: dict = {}
        reports: dict = {}
        for m in vcs:
            bodies.update(m.data[3])
            for seq, view, digest, kind in m.data[2]:
                if seq > base:
                    reports.setdefault(seq, []).append((view, digest, kind))
        chosen = []
        top = max(reports) if reports else base
        for seq in range(base + 1, top + 1):
            chosen.append((seq, self.adopt(reports.get(seq, []))))
        return base, base_state, tuple(chosen), bodies

    def adopt(self, entries: list) -> int:
        for view, digest, kind in entries:
            if kind == COMMITTED:
                return digest
        prepared = [(view, digest) for view, digest, kind in entries if kind == PREPARED]
        if prepared:
            return max(prepared, key=lambda e: (e[0], e[1]))[1]
        if self.vc_vote_threshold and entries:
            top = max(view for view, _, _ in entries)
            counts: dict = {}
            for view, digest, _ in entries:
                if view == top:
                    counts[digest] = counts.get(digest, 0) + 1
            best = max(counts.items(), key=lambda kv: (kv[1], -hash(kv[0])))
            if best[1] >= self.vc_vote_threshold:
                return best[0]
        return NULL_BATCH.digest

    def on_NEW_VIEW(self, src: int, msg: Msg) -> None:
        view = msg.view
        if src != self.leader_of(view) or view <= self.view:
            return
        vcs, chosen = msg.data
        senders = {m.auth.sender for m in vcs if m.auth is not None}
        if len(senders) < self.n - self.f or any(m.view != view for m in vcs):
            self.rejected += 1
            return
        for m in vcs:
            self.auth.verify(self.id, m.auth)
        base, base_state, mine, bodies = self.compute_new_view(vcs)
        if mine != chosen or base != msg.seq:
            self.rejected += 1
            self.start_vc(view + 1)
            return
        for seq, digest in chosen:
            inst = self.log.get(seq)
            if inst is not None and inst.committed and inst.digest != digest:
                self.start_vc(view + 1)
                return
        self.install_view(view, base, base_state, chosen, bodies, vcs)

    def install_view(self, view: int, base: int, base_state: int, chosen: tuple,
                     bodies: dict, vcs: tuple) -> None:
        self.view = view
        self.in_vc = False
        self.vc_target = view
        self.rec.view_change(self.id, view)
        for v in [v for v in self.vcs if v <= view]:
            del self.vcs[v]
        if self.t2 is not None:
            self.cancel_timer(self.t2)
            self.t2 = None
        chosen_map = dict(chosen)
        top = max([base] + list(chosen_map))
        # speculative state that the new view does not adopt is rolled back
        bad = [s for s, d in chosen_map.items()
               if s <= self.exec_seq and s in self.history and self.history[s][0] != d]
        if bad:
            self.rollback(min(bad) - 1)
        if self.exec_seq > top:
            self.rollback(top)
        for s in [s for s in self.log if s > top and not self.log[s].executed]:
            del self.log[s]
        self.outstanding = set()
        self.inflight = set()
        for s, d in chosen_map.items():
            batch = bodies.get(d, NULL_BATCH if d == NULL_BATCH.digest else None)
            inst = self.inst(s)
            if batch is not None and not inst.executed:
                self.inflight.update(batch.rids)
        if self.exec_seq < base:
            holders = [m.auth.sender for m in vcs if m.data[0] == base]
            self.request_state(base, base_state, holders)
        self.next_seq = top + 1
        self.watch = {r for r in self.watch if self.fresh(r)}
        self.arm_t2()
        self.on_new_view(view)
        if self.is_leader:
            for s in sorted(chosen_map):
                d = chosen_map[s]
                batch = bodies.get(d, NULL_BATCH if d == NULL_BATCH.digest else None)
                if batch is None or s <= self.low:
                    continue
                self.propose(s, batch)
            self.pool = {r: None for r in self.pool if r not in self.inflight and self.fresh(r)}
            self.maybe_propose()

    def on_new_view(self, view: int) -> None:
        pass

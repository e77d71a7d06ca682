"""Chained HotStuff and Themis.

Blocks form a chain (height = parent height + 1) and every block carries a
quorum certificate for its parent. A replica locks on the grandparent
certificate and commits the great-grandparent once three blocks with direct
parent links are certified. The leader is stable per view; a pacemaker moves
replicas to the next view when pending work stops committing. Blocks carry
request ids only; clients send full requests to every replica.

Themis adds a preorder step: replicas report their queue of unordered
requests to the leader, which fair-orders n-f reports and proposes that
order. Backups recompute the order before voting.
"""

from __future__ import annotations

from collections import OrderedDict

from ..auth import Scheme
from ..engine import MASK, NULL_BATCH, Batch, Context, Msg, ReplicaBase
from ..fairness import STARVATION_ROUNDS, FairnessError, PreorderBatch, fair_order


class Block:
    __slots__ = ("digest", "height", "view", "parent", "batch", "justify", "extra")

    def __init__(self, height: int, view: int, parent: int, batch: Batch, justify: "QC",
                 extra=None):
        self.height, self.view, self.parent = height, view, parent
        self.batch, self.justify, self.extra = batch, justify, extra
        self.digest = hash(("block", height, view, parent, batch.digest)) & MASK


class QC:
    __slots__ = ("height", "digest", "view", "env")

    def __init__(self, height: int, digest: int, view: int, env=None):
        self.height, self.digest, self.view, self.env = height, digest, view, env

    def rank(self) -> tuple:
        return (self.view, self.height)


GENESIS_QC = QC(0, 0, -1)
GENESIS_BLOCK = Block(0, -1, -1, NULL_BATCH, GENESIS_QC)
GENESIS_BLOCK.digest = 0


class HotStuffReplica(ReplicaBase):
    preorder_steps = 0

    def __init__(self, node_id: int, ctx: Context):
        super().__init__(node_id, ctx)
        self.view = 0
        self.blocks: dict[int, Block] = {0: GENESIS_BLOCK}
        self.high_qc = GENESIS_QC
        self.locked = GENESIS_QC
        self.last_voted = (-1, 0)        # (view, height) of the last vote
        self.committed_height = 0
        self.committed_tip = 0
        self.pool: OrderedDict = OrderedDict()
        self.votes: dict = {}
        self.qc_formed: set = set()
        self.ready = True
        self.nv: dict = {}
        self.nv_done: set = set()
        self.pm = None
        self.pm_backoff = 1
        self.stash: dict = {}            # missing parent digest -> proposals
        self.fetching: set = set()

    @property
    def quorum(self) -> int:
        return self.n - self.f

    def leader_of(self, view: int) -> int:
        return view % self.n

    @property
    def is_leader(self) -> bool:
        return self.leader_of(self.view) == self.id

    # -- requests

    def on_REQUEST(self, src: int, msg: Msg) -> None:
        for rid in self.resend_replies(msg.data):
            self.pool[rid] = None
        self.arm_pacemaker()
        if self.is_leader:
            self.maybe_propose()

    # -- proposing

    def branch(self, tip: int) -> list[Block]:
        """Uncommitted blocks from ``tip`` back to the committed prefix."""
        out = []
        b = self.blocks.get(tip)
        while b is not None and b.height > self.committed_height:
            out.append(b)
            b = self.blocks.get(b.parent)
        return out

    def maybe_propose(self) -> None:
        if not self.is_leader or not self.ready:
            return
        tail = self.branch(self.high_qc.digest)
        taken = {r for b in tail for r in b.batch.rids}
        fresh = [r for r in self.pool if r not in taken and self.fresh(r)]
        pending = any(b.batch.rids for b in tail)
        if not fresh and not pending:
            return
        batch, extra = self.next_payload(fresh, taken)
        if batch is None:
            if not pending:
                return
            batch, extra = NULL_BATCH, None
        parent = self.blocks[self.high_qc.digest]
        block = Block(parent.height + 1, self.view, parent.digest, batch, self.high_qc, extra)
        self.ready = False
        self.hops_in = 0
        if self.equivocator:
            other = Batch(tuple(reversed(batch.rids)))
            twin = Block(block.height, self.view, parent.digest, other, self.high_qc, extra)
            half = len(self.others) // 2
            for dsts, b in ((self.others[:half], block), (self.others[half:], twin)):
                self.multicast(dsts, Msg("PROPOSE", self.view, b.height, b.digest, b, 1),
                               self.block_bytes(b), Scheme.SIGNATURE)
            return
        msg = Msg("PROPOSE", self.view, block.height, block.digest, block, 1)
        self.multicast(self.others, msg, self.block_bytes(block), Scheme.SIGNATURE)
        self.on_block(block, 1)

    def next_payload(self, fresh: list, taken: set) -> tuple:
        if not fresh:
            return None, None
        return Batch(fresh[: self.cfg.batch_size]), None

    def block_bytes(self, b: Block) -> int:
        return 96 + self.cfg.rid_size * len(b.batch)

    # -- voting

    def on_PROPOSE(self, src: int, msg: Msg) -> None:
        if src != self.leader_of(msg.view) or msg.view != self.view:
            return
        block = msg.data
        if block.digest != msg.digest or block.view != msg.view:
            return
        self.on_block(block, msg.hops)

    def qc_valid(self, qc: QC) -> bool:
        if qc.height == 0:
            return qc.digest == 0
        env = qc.env
        return (env is not None and env.scheme is Scheme.COMBINED
                and len(env.signers) >= self.quorum
                and env.digest == ("VOTE", qc.view, qc.height, qc.digest))

    def on_block(self, block: Block, hops: int) -> None:
        parent = self.blocks.get(block.parent)
        if parent is None:
            self.stash.setdefault(block.parent, []).append((block, hops))
            self.fetch(block.parent)
            return
        if block.height != parent.height + 1 or block.justify.digest != block.parent:
            self.rejected += 1
            return
        if not self.qc_valid(block.justify) or not self.payload_ok(block, parent):
            self.rejected += 1
            return
        self.blocks[block.digest] = block
        self.update(block, hops)
        safe = ((block.view, block.height) > self.last_voted and
                (self.extends(block, self.locked.digest) or
                 block.justify.rank() > self.locked.rank()))
        if safe and block.view == self.view:
            self.last_voted = (block.view, block.height)
            # the chain is growing in this view, so the leader is alive
            self.arm_pacemaker(restart=True)
            key = ("VOTE", block.view, block.height, block.digest)
            leader = self.leader_of(self.view)
            if leader == self.id:
                self.add_vote(self.id, self.auth.share(self.id, key), block)
            else:
                vote = Msg("VOTE", block.view, block.height, block.digest, None, hops + 1)
                self.multicast([leader], vote, 0, Scheme.SHARE)
        for waiting, h in self.stash.pop(block.digest, []):
            self.on_block(waiting, h)

    def payload_ok(self, block: Block, parent: Block) -> bool:
        return True

    def extends(self, block: Block, ancestor: int) -> bool:
        b = block
        while b is not None and b.height > 0:
            if b.digest == ancestor:
                return True
            b = self.blocks.get(b.parent)
        return ancestor == 0

    def on_VOTE(self, src: int, msg: Msg) -> None:
        if msg.view != self.view or not self.is_leader:
            return
        block = self.blocks.get(msg.digest)
        if block is not None and msg.auth.digest == ("VOTE", msg.view, block.height, msg.digest):
            self.add_vote(src, msg.auth, block)

    def add_vote(self, src: int, env, block: Block) -> None:
        got = self.votes.setdefault(block.digest, {})
        got[src] = env
        if len(got) < self.quorum or block.digest in self.qc_formed:
            return
        self.qc_formed.add(block.digest)
        cert = self.auth.combine(self.id, got.values(), self.quorum)
        qc = QC(block.height, block.digest, block.view, cert)
        self.update_high(qc)
        if block.view == self.view:
            self.ready = True
            self.maybe_propose()

    # -- chain rules

    def update_high(self, qc: QC) -> None:
        if qc.rank() > self.high_qc.rank() and qc.digest in self.blocks:
            self.high_qc = qc

    def update(self, block: Block, hops: int) -> None:
        self.update_high(block.justify)
        b2 = self.blocks.get(block.justify.digest)
        if b2 is None or b2.height == 0:
            return
        b1 = self.blocks.get(b2.justify.digest)
        if b1 is None:
            return
        if b2.justify.rank() > self.locked.rank():
            self.locked = b2.justify
        if b1.height == 0:
            return
        b0 = self.blocks.get(b1.justify.digest)
        if b0 is not None and b2.parent == b1.digest and b1.parent == b0.digest:
            self.commit(b0, block)

    def commit(self, b0: Block, trigger: Block) -> None:
        if b0.height <= self.committed_height:
            return
        chain = []
        b = b0
        while b.height > self.committed_height:
            chain.append(b)
            b = self.blocks[b.parent]
        if b.digest != self.committed_tip:
            self.rec._violate("agreement", f"replica {self.id} commit forks below {b0.height}")
            return
        for blk in reversed(chain):
            steps = self.preorder_steps + 1 + 2 * (trigger.height - blk.height)
            self.rec.learn(blk.height, steps)
            state, done = self.apply_batch(blk.height, blk.batch)
            for rid in blk.batch.rids:
                self.pool.pop(rid, None)
            self.rec.commit(self.id, blk.height, blk.digest, state, blk.batch.rids)
            self.send_replies(self.view, blk.height, state, done)
            self.committed_height, self.committed_tip = blk.height, blk.digest
        self.prune()
        self.pm_backoff = 1
        self.arm_pacemaker(restart=True)

    def prune(self) -> None:
        keep = self.committed_height - 32
        if keep <= 0 or len(self.blocks) < 256:
            return
        for d in [d for d, b in self.blocks.items() if 0 < b.height < keep]:
            del self.blocks[d]
            self.votes.pop(d, None)
            self.qc_formed.discard(d)

    # -- missing blocks

    def fetch(self, digest: int) -> None:
        if digest in self.fetching:
            return
        self.fetching.add(digest)
        msg = self.out("FETCH_BLOCK", self.view, 0, digest)
        self.multicast(self.others, msg, 0, Scheme.MAC_VECTOR)

    def on_FETCH_BLOCK(self, src: int, msg: Msg) -> None:
        b = self.blocks.get(msg.digest)
        if b is None:
            return
        chain = []
        while b is not None and b.height > 0 and len(chain) < 64:
            chain.append(b)
            b = self.blocks.get(b.parent)
        self.multicast([src], self.out("BLOCKS", self.view, 0, msg.digest, tuple(chain)),
                       sum(self.block_bytes(c) for c in chain), Scheme.SIGNATURE)

    def on_BLOCKS(self, src: int, msg: Msg) -> None:
        if msg.digest not in self.fetching:
            return
        self.fetching.discard(msg.digest)
        for b in reversed(msg.data):
            if b.digest in self.blocks:
                continue
            parent = self.blocks.get(b.parent)
            if parent is None or b.height != parent.height + 1 or not self.qc_valid(b.justify):
                continue
            self.blocks[b.digest] = b
            self.update(b, 0)
            for waiting, h in self.stash.pop(b.digest, []):
                self.on_block(waiting, h)

    # -- pacemaker

    def has_work(self) -> bool:
        if any(self.fresh(r) for r in self.pool):
            return True
        return any(b.batch.rids for b in self.branch(self.high_qc.digest))

    def arm_pacemaker(self, restart: bool = False) -> None:
        if restart and self.pm is not None:
            self.cancel_timer(self.pm)
            self.pm = None
        if self.pm is None and self.has_work():
            self.pm = self.set_timer(self.cfg.pacemaker_min * self.pm_backoff, ("pm",))

    def timer_pm(self, tag) -> None:
        self.pm = None
        if not self.has_work():
            return
        self.pm_backoff = min(self.pm_backoff * 2, 64)
        self.enter_view(self.view + 1)

    def enter_view(self, view: int) -> None:
        if view <= self.view:
            return
        self.view = view
        self.ready = False
        self.rec.view_change(self.id, view)
        for v in [v for v in self.nv if v < view]:
            del self.nv[v]
        msg = self.out("NEW_VIEW", view, self.high_qc.height, self.high_qc.digest, self.high_qc)
        leader = self.leader_of(view)
        if leader == self.id:
            self.note_new_view(self.id, view, self.high_qc)
        else:
            self.multicast([leader], msg, 96, Scheme.SIGNATURE)
        if self.pm is not None:
            self.cancel_timer(self.pm)
            self.pm = None
        self.arm_pacemaker()

    def on_NEW_VIEW(self, src: int, msg: Msg) -> None:
        if msg.view < self.view or not self.qc_valid(msg.data):
            return
        self.note_new_view(src, msg.view, msg.data)

    def note_new_view(self, src: int, view: int, qc: QC) -> None:
        got = self.nv.setdefault(view, {})
        got[src] = qc
        if qc.digest in self.blocks:
            self.update_high(qc)
        elif qc.height > 0:
            self.fetch(qc.digest)
        if view > self.view and len(got) >= self.f + 1:
            self.enter_view(view)
        if view == self.view and self.is_leader and len(got) >= self.quorum and not self.ready:
            if view not in self.nv_done:
                self.nv_done.add(view)
                self.ready = True
                self.maybe_propose()


class ThemisReplica(HotStuffReplica):
    preorder_steps = 1

    def __init__(self, node_id: int, ctx: Context):
        super().__init__(node_id, ctx)
        self.reports: dict = {}
        self.deferrals: dict = {}
        self.preorder_timer = None
        self.round = 0

    def on_REQUEST(self, src: int, msg: Msg) -> None:
        super().on_REQUEST(src, msg)
        if self.preorder_timer is None:
            self.preorder_timer = self.set_timer(self.cfg.tau6, ("preorder",))

    def timer_preorder(self, tag) -> None:
        self.preorder_timer = None
        queue = tuple(r for r in self.pool if self.fresh(r))[: 4 * self.cfg.batch_size]
        if not queue:
            return
        self.round += 1
        leader = self.leader_of(self.view)
        if leader == self.id:
            self.reports[self.id] = (queue, None)
            self.maybe_propose()
        else:
            msg = self.out("PREORDER", self.view, self.round, None, queue)
            self.multicast([leader], msg, self.cfg.rid_size * len(queue), Scheme.SIGNATURE)
        self.preorder_timer = self.set_timer(self.cfg.tau6, ("preorder",))

    def on_PREORDER(self, src: int, msg: Msg) -> None:
        if self.leader_of(msg.view) != self.id:
            return
        self.reports[src] = (msg.data, msg.auth)
        if self.is_leader:
            self.maybe_propose()

    def next_payload(self, fresh: list, taken: set) -> tuple:
        if len(self.reports) < self.quorum:
            return None, None
        chosen = sorted(self.reports)[: self.quorum]
        batches = tuple((r, tuple(x for x in self.reports[r][0] if x not in taken and self.fresh(x)))
                        for r in chosen)
        union = {x for _, q in batches for x in q}
        force = tuple(sorted(x for x, c in self.deferrals.items()
                             if c >= STARVATION_ROUNDS and x in union))
        order, deferred = self.fair(batches, force)
        payload = tuple(order[: self.cfg.batch_size])
        if not payload:
            return None, None
        for x in payload:
            self.deferrals.pop(x, None)
        for x in deferred:
            self.deferrals[x] = self.deferrals.get(x, 0) + 1
        envs = tuple(self.reports[r][1] for r in chosen)
        return Batch(payload), (batches, force, envs)

    def fair(self, batches: tuple, force: tuple) -> tuple:
        pre = [PreorderBatch(r, 0, q) for r, q in batches]
        k = len({x for _, q in batches for x in q})
        self.charge(self.cfg.order_cost * k * len(batches))
        key = (batches, force)
        hit = _ORDER_CACHE.get(key)
        if hit is None:
            hit = fair_order(pre, self.n, self.f, force=force)
            if len(_ORDER_CACHE) > 256:
                _ORDER_CACHE.clear()
            _ORDER_CACHE[key] = hit
        return hit

    def block_bytes(self, b: Block) -> int:
        size = super().block_bytes(b)
        if b.extra is not None:
            batches = b.extra[0]
            size += sum(self.cfg.rid_size * len(q) + 64 for _, q in batches)
        return size

    def payload_ok(self, block: Block, parent: Block) -> bool:
        if block.extra is None:
            return not block.batch.rids
        batches, force, envs = block.extra
        if len({r for r, _ in batches}) < self.quorum:
            return False
        for env in envs:
            if env is not None:
                self.auth.verify(self.id, env)
        try:
            order, _ = self.fair(batches, force)
        except FairnessError:
            return False
        return tuple(order[: self.cfg.batch_size]) == block.batch.rids

    def enter_view(self, view: int) -> None:
        self.reports = {}
        super().enter_view(view)


_ORDER_CACHE: dict = {}

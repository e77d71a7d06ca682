"""Order-fair linearization of preorder batches.

Each replica reports the requests it saw, in arrival order. The leader builds
a dependency graph whose edge a->b carries the number of batches ordering a
before b, keeps majority-supported edges, condenses cycles and emits a
deterministic topological order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Iterable, Sequence

import numpy as np

STARVATION_ROUNDS = 3


class FairnessError(Exception):
    pass


class DuplicateContributor(FairnessError):
    pass


class UnsupportedGamma(FairnessError):
    pass


@dataclass(frozen=True)
class PreorderBatch:
    replica: int
    round: int
    requests: tuple

    def __post_init__(self):
        if len(set(self.requests)) != len(self.requests):
            raise FairnessError(f"duplicate request ids in batch from {self.replica}")


@dataclass
class DependencyGraph:
    vertices: list                 # sorted request ids, placeable this round
    support: np.ndarray            # support[i, j]: batches ordering vertices[i] first
    collected: int
    deferred: list = field(default_factory=list)
    seen: dict = field(default_factory=dict)

    def edge_support(self, a: Hashable, b: Hashable) -> int:
        idx = {v: i for i, v in enumerate(self.vertices)}
        return int(self.support[idx[a], idx[b]])


def edge_threshold(collected: int, gamma=1) -> int:
    """Minimum support for an edge to be kept."""
    if Fraction(gamma) != 1:
        raise UnsupportedGamma("edge threshold is only defined for gamma = 1")
    return (collected + 2) // 2      # ceil((collected + 1) / 2)


def collect_round(batches: Sequence[PreorderBatch], n: int, f: int,
                  force: Iterable[Hashable] = ()) -> DependencyGraph:
    """Build the dependency graph for one round.

    Requests seen in fewer than f+1 batches are deferred unless listed in
    ``force`` (the starvation guard).
    """
    contributors = [b.replica for b in batches]
    if len(set(contributors)) != len(contributors):
        raise DuplicateContributor("a replica contributed more than one batch")
    if len(batches) < n - f:
        raise FairnessError(f"need {n - f} batches, got {len(batches)}")
    force = set(force)
    seen: dict = {}
    for b in batches:
        for r in b.requests:
            seen[r] = seen.get(r, 0) + 1
    placeable = sorted(r for r, c in seen.items() if c >= f + 1 or r in force)
    deferred = sorted(r for r, c in seen.items() if c < f + 1 and r not in force)
    k = len(placeable)
    idx = {r: i for i, r in enumerate(placeable)}
    support = np.zeros((k, k), dtype=np.int32)
    missing = np.iinfo(np.int32).max
    for b in batches:
        pos = np.full(k, missing, dtype=np.int64)
        for p, r in enumerate(b.requests):
            i = idx.get(r)
            if i is not None:
                pos[i] = p
        present = pos != missing
        before = (pos[:, None] < pos[None, :]) & present[:, None] & present[None, :]
        support += before
    return DependencyGraph(placeable, support, len(batches), deferred, seen)


def _closure(adj: np.ndarray) -> np.ndarray:
    reach = adj | np.eye(len(adj), dtype=bool)
    while True:
        nxt = (reach.astype(np.float32) @ reach.astype(np.float32)) > 0
        if (nxt == reach).all():
            return reach
        reach = nxt


def finalize_order(g: DependencyGraph, collected: int | None = None, n: int | None = None,
                   f: int | None = None, gamma=1) -> list:
    """Deterministic fair order over the graph's placeable vertices."""
    collected = g.collected if collected is None else collected
    if n is not None and f is not None and collected < n - f:
        raise FairnessError(f"collected {collected} < n - f = {n - f}")
    k = len(g.vertices)
    if k == 0:
        return []
    adj = g.support >= edge_threshold(collected, gamma)
    np.fill_diagonal(adj, False)
    reach = _closure(adj)
    mutual = reach & reach.T
    # component label = smallest vertex index in the component
    label = mutual.argmax(axis=1)
    comps = sorted(set(label.tolist()))
    cidx = {c: i for i, c in enumerate(comps)}
    members: list[list[int]] = [[] for _ in comps]
    for v in range(k):
        members[cidx[label[v]]].append(v)
    m = len(comps)
    cadj = np.zeros((m, m), dtype=bool)
    lab = np.array([cidx[x] for x in label.tolist()])
    src, dst = np.nonzero(adj)
    keep = lab[src] != lab[dst]
    cadj[lab[src[keep]], lab[dst[keep]]] = True
    indeg = cadj.sum(axis=0)
    heap = [c for c in range(m) if indeg[c] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        c = heapq.heappop(heap)
        order.extend(g.vertices[v] for v in members[c])
        for d in np.nonzero(cadj[c])[0].tolist():
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, d)
    return order


def fair_order(batches: Sequence[PreorderBatch], n: int, f: int, gamma=1,
               force: Iterable[Hashable] = ()) -> tuple[list, list]:
    """Convenience wrapper returning (order, deferred)."""
    g = collect_round(batches, n, f, force)
    return finalize_order(g, n=n, f=f, gamma=gamma), g.deferred


class FairOrderer:
    """Round manager: carries unplaced requests forward per replica and applies
    the starvation guard after repeated deferral."""

    def __init__(self, n: int, f: int, gamma=1):
        self.n, self.f, self.gamma = n, f, gamma
        self.pending: dict[int, list] = {}
        self.deferrals: dict = {}
        self.ordered: set = set()
        self.round = 0

    def unified_batches(self, fresh: Iterable[PreorderBatch]) -> list[PreorderBatch]:
        """Per-replica unconsumed requests followed by the replica's new batch."""
        out = []
        for b in sorted(fresh, key=lambda b: b.replica):
            queue = [r for r in self.pending.get(b.replica, []) if r not in self.ordered]
            known = set(queue)
            queue.extend(r for r in b.requests if r not in known and r not in self.ordered)
            self.pending[b.replica] = queue
            out.append(PreorderBatch(b.replica, self.round, tuple(queue)))
        return out

    def forced(self) -> list:
        return sorted(r for r, c in self.deferrals.items() if c >= STARVATION_ROUNDS)

    def step(self, fresh: Iterable[PreorderBatch]) -> list:
        batches = self.unified_batches(fresh)
        order, deferred = fair_order(batches, self.n, self.f, self.gamma, self.forced())
        self.commit(order, deferred)
        return order

    def commit(self, order: Sequence, deferred: Iterable) -> None:
        self.ordered.update(order)
        for r in order:
            self.deferrals.pop(r, None)
        for r in deferred:
            self.deferrals[r] = self.deferrals.get(r, 0) + 1
        for rep, queue in self.pending.items():
            self.pending[rep] = [r for r in queue if r not in self.ordered]
        self.round += 1

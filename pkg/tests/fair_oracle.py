"""Independent pure-Python reference for the fair-order construction."""

import heapq
import random


def support_counts(batches):
    sup = {}
    for seq in batches:
        for i, a in enumerate(seq):
            for b in seq[i + 1:]:
                sup[(a, b)] = sup.get((a, b), 0) + 1
    return sup


def reference_order(batches, f):
    """batches: list of request-id sequences. Returns (order, deferred, sccs, sup)."""
    count = {}
    for seq in batches:
        for r in seq:
            count[r] = count.get(r, 0) + 1
    verts = sorted(r for r, c in count.items() if c >= f + 1)
    deferred = sorted(r for r, c in count.items() if c < f + 1)
    sup = support_counts(batches)
    need = -(-(len(batches) + 1) // 2)
    succ = {v: [w for w in verts if w != v and sup.get((v, w), 0) >= need] for v in verts}

    def reachable(v):
        seen, stack = {v}, [v]
        while stack:
            for w in succ[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen

    reach = {v: reachable(v) for v in verts}
    comp = {v: min(w for w in verts if w in reach[v] and v in reach[w]) for v in verts}
    comps = sorted(set(comp.values()))
    members = {c: sorted(v for v in verts if comp[v] == c) for c in comps}
    cedges = {c: set() for c in comps}
    for v in verts:
        for w in succ[v]:
            if comp[v] != comp[w]:
                cedges[comp[v]].add(comp[w])
    indeg = {c: 0 for c in comps}
    for c in comps:
        for d in cedges[c]:
            indeg[d] += 1
    heap = [c for c in comps if indeg[c] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        c = heapq.heappop(heap)
        order.extend(members[c])
        for d in sorted(cedges[c]):
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, d)
    return order, deferred, comp, sup


def random_instance(rng: random.Random, max_n=9):
    f = rng.randint(1, 2)
    n = min(4 * f + 1, max_n)
    collected = rng.randint(n - f, n)
    universe = list(range(rng.randint(1, 7)))
    base = universe[:]
    rng.shuffle(base)
    batches = []
    for _ in range(collected):
        seq = [r for r in base if rng.random() < 0.85]
        # local perturbation of the common order
        for _ in range(rng.randint(0, 3)):
            if len(seq) > 1:
                i = rng.randrange(len(seq) - 1)
                seq[i], seq[i + 1] = seq[i + 1], seq[i]
        if rng.random() < 0.2:
            rng.shuffle(seq)
        batches.append(seq)
    return n, f, batches

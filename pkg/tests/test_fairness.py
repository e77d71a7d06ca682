import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from bftlab.fairness import (DuplicateContributor, FairOrderer, FairnessError,
                             PreorderBatch, UnsupportedGamma, collect_round, edge_threshold,
                             fair_order, finalize_order)

from fair_oracle import random_instance, reference_order


def mk(batches, round_=0):
    return [PreorderBatch(i, round_, tuple(seq)) for i, seq in enumerate(batches)]


def test_threshold_is_strict_majority():
    assert edge_threshold(5) == 3
    assert edge_threshold(4) == 3
    assert edge_threshold(13) == 7
    with pytest.raises(UnsupportedGamma):
        edge_threshold(5, 0.75)


def test_unanimous_support_counts():
    g = collect_round(mk([["x", "y"]] * 13), n=17, f=4)
    assert g.edge_support("x", "y") == 13
    assert g.edge_support("y", "x") == 0


def test_underobserved_request_is_deferred():
    batches = [["a", "z"]] * 3 + [["a"]] * 10
    order, deferred = fair_order(mk(batches), n=17, f=4)
    assert order == ["a"] and deferred == ["z"]


def test_single_request():
    g = collect_round(mk([["a"]] * 4), n=5, f=1)
    assert g.vertices == ["a"] and g.support.sum() == 0
    assert finalize_order(g) == ["a"]


def test_majority_wins_two_requests():
    order, _ = fair_order(mk([["a", "b"]] * 3 + [["b", "a"]] * 2), n=5, f=1)
    assert order == ["a", "b"]


def test_two_request_outcomes_match_oracle():
    # every assignment of the pair order across five batches
    for bits in itertools.product([0, 1], repeat=5):
        batches = [["a", "b"] if x else ["b", "a"] for x in bits]
        order, _ = fair_order(mk(batches), n=5, f=1)
        assert order == (["a", "b"] if sum(bits) >= 3 else ["b", "a"])


def test_condorcet_cycle_condenses_by_id():
    batches = [["a", "b", "c"], ["b", "c", "a"], ["c", "a", "b"]]
    order, _ = fair_order(mk(batches), n=4, f=1)
    assert order == ["a", "b", "c"]


def test_unanimous_order_is_preserved():
    seq = [5, 3, 9, 1]
    order, _ = fair_order(mk([seq] * 7), n=9, f=2)
    assert order == seq


def test_duplicate_contributor_rejected():
    with pytest.raises(DuplicateContributor):
        collect_round([PreorderBatch(0, 0, ("a",)), PreorderBatch(0, 0, ("b",))], n=4, f=1)


def test_too_few_batches_rejected():
    with pytest.raises(FairnessError):
        collect_round(mk([["a"]] * 2), n=4, f=1)


def test_duplicate_request_in_batch_rejected():
    with pytest.raises(FairnessError):
        PreorderBatch(0, 0, ("a", "a"))


def _check_instance(n, f, batches):
    order, deferred = fair_order(mk(batches), n, f)
    ref, ref_deferred, comp, sup = reference_order(batches, f)
    assert order == ref and deferred == ref_deferred
    assert len(order) == len(set(order))
    need = edge_threshold(len(batches))
    pos = {r: i for i, r in enumerate(order)}
    for a, b in itertools.permutations(order, 2):
        if sup.get((a, b), 0) >= need and comp[a] != comp[b]:
            assert pos[a] < pos[b]
    return order


def test_random_instances_match_oracle():
    rng = random.Random(7)
    for _ in range(2000):
        _check_instance(*random_instance(rng))


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1), st.randoms(use_true_random=False))
def test_permutation_invariance(seed, shuffler):
    n, f, batches = random_instance(random.Random(seed))
    order = _check_instance(n, f, batches)
    perm = list(enumerate(batches))
    shuffler.shuffle(perm)
    shuffled = [PreorderBatch(i, 0, tuple(seq)) for i, seq in perm]
    again, _ = fair_order(shuffled, n, f)
    assert again == order


@settings(max_examples=200, deadline=None)
@given(st.lists(st.permutations(list(range(5))), min_size=4, max_size=9))
def test_output_is_total_over_placeable(batches):
    n = len(batches)
    f = (n - 1) // 4 or 1
    order, deferred = fair_order(mk(batches), n, f)
    assert sorted(order) == list(range(5)) and deferred == []


def test_orderer_carries_deferred_requests_forward():
    fo = FairOrderer(n=5, f=1)
    # round 0: "z" seen by one replica only
    first = fo.step(mk([["a", "z"], ["a"], ["a"], ["a"]], 0))
    assert first == ["a"]
    # round 1: others see it too
    second = fo.step(mk([["b"], ["z", "b"], ["z", "b"], ["b"]], 1))
    assert second == ["z", "b"]
    assert fo.deferrals == {}


def test_starvation_guard_forces_placement():
    fo = FairOrderer(n=5, f=1)
    orders = []
    for rnd in range(5):
        fresh = mk([[("r", rnd)], [("r", rnd)], [("r", rnd)], [("r", rnd)]], rnd)
        if rnd == 0:
            fresh[0] = PreorderBatch(0, 0, (("q", 0), ("r", 0)))
        orders.append(fo.step(fresh))
    flat = [r for o in orders for r in o]
    assert flat.count(("q", 0)) == 1
    assert orders[0] == [("r", 0)]


def test_orderer_never_duplicates():
    rng = random.Random(3)
    fo = FairOrderer(n=9, f=2)
    emitted = []
    for rnd in range(30):
        fresh = []
        for rep in range(rng.randint(7, 9)):
            reqs = [x for x in range(rnd * 3, rnd * 3 + 6) if rng.random() < 0.8]
            rng.shuffle(reqs)
            fresh.append(PreorderBatch(rep, rnd, tuple(reqs)))
        emitted.extend(fo.step(fresh))
    assert len(emitted) == len(set(emitted))

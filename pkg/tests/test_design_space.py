from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from bftlab import design_space as ds
from bftlab.design_space import ProtocolDescriptor as PD


PBFT = ds.get_template("PBFT")


@pytest.mark.parametrize("name", list(ds.DERIVATIONS))
def test_derivation_reproduces_row(name):
    derived = ds.derive_chain(PBFT, ds.DERIVATIONS[name])
    assert derived.name == name
    assert derived.row() == ds.get_template(name).row()


def test_table_phase_labels():
    labels = {n: d.phase_label() for n, d in ds.TEMPLATES.items()}
    assert labels["PBFT"] == "3"
    assert labels["Zyzzyva"] == "1"
    assert labels["SBFT"] == "3"
    assert labels["HotStuff"] == "7"
    assert labels["Themis"] == "1+7"
    assert labels["Kauri"] == "7h"
    assert labels["FaB"] == "2"
    assert labels["FLB"] == "2"
    assert labels["FTB"] == "3h"
    assert ds.TEMPLATES["SBFT"].phase_label(slow=True) == "5"
    assert ds.TEMPLATES["Zyzzyva"].phase_label(slow=True) == "3"


def test_identity_chain():
    assert ds.derive_chain(PBFT, []) == PBFT


def test_named_derivations():
    assert ds.derive_chain(PBFT, ["DC1", "DC3"]).name == "HotStuff"
    assert ds.derive_chain(PBFT, ["DC8", "DC10"]).name == "Zyzzyva5"
    assert ds.derive_chain("PBFT", ["linearization", "leader-rotation"]).name == "HotStuff"


def test_apply_dc2_gives_fab():
    fab = ds.apply_choice(PBFT, "DC2")
    assert fab.name == "FaB"
    assert (fab.replicas, fab.phases, fab.topology) == ("5f+1", 2, "clique")


def test_apply_dc14_on_hotstuff_gives_kauri():
    kauri = ds.apply_choice(ds.get_template("HotStuff"), "DC14")
    assert kauri.name == "Kauri"
    assert kauri.topology == "tree" and kauri.phase_label() == "7h"
    assert "a3" in kauri.assumptions and kauri.load_balancing


def test_flb_from_linear_pbft():
    flb = ds.derive_chain(PBFT, ["DC1", "DC2"])
    assert (flb.replicas, flb.phases, flb.topology, flb.auth) == ("5f-1", 2, "star", "signature")


def test_not_applicable_names_condition_and_step():
    with pytest.raises(ds.NotApplicable) as err:
        ds.derive_chain(PBFT, ["DC1", "DC1"])
    assert err.value.step == 1
    assert "clique" in str(err.value)


def test_choice_is_deterministic():
    for choice in ds.CHOICES.values():
        if choice.domain_predicate(PBFT):
            assert ds.apply_choice(PBFT, choice) == ds.apply_choice(PBFT, choice)


def _all_reachable():
    frontier = [PBFT]
    seen = {PBFT}
    while frontier:
        d = frontier.pop()
        for c in ds.CHOICES.values():
            if not c.domain_predicate(d):
                continue
            try:
                out = ds.apply_choice(d, c)
            except ds.NotApplicable:
                continue
            if out not in seen and len(seen) < 400:
                seen.add(out)
                frontier.append(out)
    return seen


def test_choice_outputs_are_never_invalid():
    for d in _all_reachable():
        assert ds.validate_point(d)[0] != "invalid"


def test_validate_examples():
    assert ds.validate_point(PBFT) == ("valid", "PBFT")
    assert ds.validate_point(PD(phases=2, topology="clique")) == ("invalid", "R1")
    flb_like = PD(replicas="5f-1", phases=2, topology="clique", auth="signature")
    assert ds.validate_point(flb_like)[0] == "valid"


def test_validate_rules():
    assert ds.validate_point(PD(replicas="4f+1", phases=2))[1] == "R2"
    assert ds.validate_point(PD(replicas="5f-1", phases=2, auth="mac"))[1] == "R2"
    assert ds.validate_point(PD(topology="star", auth="mac", relays_certificate=True))[1] == "R3"
    assert ds.validate_point(PD(fairness="full", gamma=Fraction(1)))[1] == "R4"
    assert ds.validate_point(PD(view_change="rotating"))[1] == "R5"
    assert ds.validate_point(PD(replicas="2f+1"))[1] == "R6"
    assert ds.validate_point(PD(load_balancing=True))[1] == "R7"
    assert ds.validate_point(PD(phases=4)) == ("unverified", None)


def test_malformed_names_field():
    with pytest.raises(ds.MalformedDescriptor) as err:
        PD(topology="ring")
    assert err.value.field == "topology"
    with pytest.raises(ds.MalformedDescriptor) as err:
        PD(phases=3, slow_phases=2)
    assert err.value.field == "slow_phases"
    with pytest.raises(ds.MalformedDescriptor):
        PD(topology="tree")


def test_replica_count():
    assert ds.ReplicaCount("5f-1").resolve(2) == 9
    assert ds.ReplicaCount("3f+1").solve_f(7) == 2
    assert ds.ReplicaCount("3f+1").solve_f(8) is None
    with pytest.raises(ds.MalformedDescriptor):
        ds.ReplicaCount("6f")


@given(st.sampled_from(ds.REPLICA_FORMULAS), st.integers(min_value=1, max_value=1000))
def test_replica_resolve_at_least_f_plus_one(formula, f):
    a, b = ds.ReplicaCount(formula).coefficients
    n = ds.ReplicaCount(formula).resolve(f)
    assert n == a * f + b and n >= f + 1


def test_query_examples():
    star = ds.query({"strategy": "pessimistic", "topology": "star", "replicas": "3f+1"})
    assert "HotStuff" in [d.name for d, _ in star]
    assert ds.query({"strategy": "pessimistic", "phases": 2, "replicas": "3f+1"}) == []
    fair = ds.query(ds.Query.of(fairness=True, gamma=1))
    assert fair[0][0].name == "Themis" and fair[0][0].replicas == "4f+1"


def test_query_named_first_in_table_order():
    results = ds.query({"topology": "star"})
    names = [d.name for d, _ in results if d.name]
    assert names == [n for n in ds.TABLE_ORDER if n in names]
    first_unnamed = next(i for i, (d, _) in enumerate(results) if d.name is None)
    assert all(d.name is None for d, _ in results[first_unnamed:])
    assert all(status == "unverified" for _, status in results[first_unnamed:])


@pytest.mark.parametrize("name", ds.TABLE_ORDER)
def test_full_row_query_returns_exactly_that_protocol(name):
    row = ds.TEMPLATES[name].row()
    assert [d.name for d, _ in ds.query(row)] == [name]


def test_full_invalid_row_query_is_empty():
    row = dict(PBFT.row(), phases="2")
    assert ds.query(row) == []


def test_query_rejects_values_outside_set():
    with pytest.raises(ds.MalformedDescriptor):
        ds.query({"topology": "ring"})


def test_query_is_deterministic():
    q = {"strategy": "optimistic", "replicas": "5f+1"}
    assert ds.query(q) == ds.query(q)


def test_fairness_bound():
    assert ds.fairness_bound_holds("4f+1", 1)
    assert not ds.fairness_bound_holds("3f+1", 1)
    # gamma = 3/4 needs n > 8f
    assert not ds.fairness_bound_holds("7f+1", Fraction(3, 4))
    assert not ds.fairness_bound_holds("5f+1", Fraction(3, 4))
    minimal = [f for f in ds.REPLICA_FORMULAS if ds.fairness_bound_holds(f, 1)]
    assert min(minimal, key=lambda f: ds.ReplicaCount(f).resolve(10)) == "4f+1"
    assert not ds.fairness_bound_holds("7f+1", Fraction(51, 100))


@pytest.mark.parametrize("name", list(ds.TEMPLATES) + list(ds.WAYPOINTS))
def test_serialization_round_trip(name):
    d = ds.get_template(name)
    text = ds.dumps(d)
    assert ds.loads(text) == d
    assert ds.dumps(ds.loads(text)) == text


@settings(max_examples=200)
@given(st.sampled_from(list(ds.TEMPLATES.values())),
       st.sampled_from(ds.TOPOLOGIES[:2]), st.sampled_from(ds.AUTHS),
       st.integers(min_value=1, max_value=9))
def test_serialization_round_trip_random(base, topology, auth, phases):
    try:
        d = ds.ProtocolDescriptor(**{**base.__dict__, "topology": topology, "auth": auth,
                                     "phases": phases, "slow_phases": None,
                                     "per_height": False, "load_balancing": False})
    except ds.MalformedDescriptor:
        return
    assert ds.loads(ds.dumps(d)) == d


def test_loads_reports_bad_line():
    with pytest.raises(ds.MalformedDescriptor):
        ds.loads("replicas 3f+1\n")
    with pytest.raises(ds.MalformedDescriptor) as err:
        ds.loads("colour = red\n")
    assert err.value.field == "colour"

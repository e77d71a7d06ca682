import pytest
from hypothesis import given, strategies as st

from bftlab.auth import (AuthError, AuthModel, ContentMismatch, CryptoCosts, Envelope,
                         ForgeryRejected, InsufficientShares, Scheme)


def test_honest_signature():
    auth = AuthModel()
    env = auth.sign(2, b"D")
    assert env.sender == 2 and env.scheme is Scheme.SIGNATURE
    assert auth.verify(0, env)


def test_byzantine_cannot_claim_honest_sender():
    auth = AuthModel(byzantine={3})
    with pytest.raises(ForgeryRejected):
        auth.create(3, b"D", "signature", as_sender=1)
    with pytest.raises(ForgeryRejected):
        auth.create(1, b"D", "signature", as_sender=2)


def test_colluding_byzantine_may_share_identity():
    auth = AuthModel(byzantine={2, 3})
    assert auth.create(3, b"D", "signature", as_sender=2).sender == 2


def test_hand_built_envelope_fails_verification_and_audit():
    auth = AuthModel(byzantine={3})
    fake = Envelope(sender=1, digest=b"D", scheme=Scheme.SIGNATURE, token=999)
    assert not auth.verify(0, fake)
    assert auth.audit([fake]) == [fake]
    real = auth.sign(1, b"D")
    assert auth.audit([real, auth.sign(3, b"X")]) == []


def test_invalid_authenticator_only_from_byzantine():
    auth = AuthModel(byzantine={3})
    bad = auth.create(3, b"D", "signature", valid=False)
    assert not auth.verify(0, bad)
    with pytest.raises(AuthError):
        auth.create(0, b"D", "signature", valid=False)


def test_mac_vector_size_and_recipients():
    auth = AuthModel()
    env = auth.mac(0, b"D", range(4))
    assert auth.size(env) == 64
    assert auth.verify(2, env)
    assert not auth.verify(7, env)
    assert not auth.assert_transferable(env)


def test_transferability():
    auth = AuthModel()
    assert auth.assert_transferable(auth.sign(0, b"D"))
    cert = auth.combine(0, [auth.share(i, b"D") for i in range(3)], 3)
    assert auth.assert_transferable(cert)
    assert auth.size(cert) == 48 and auth.verify(1, cert)


def test_combine_errors():
    auth = AuthModel()
    with pytest.raises(InsufficientShares):
        auth.combine(0, [auth.share(i, b"D") for i in range(2)], 3)
    dup = [auth.share(0, b"D"), auth.share(0, b"D"), auth.share(1, b"D")]
    with pytest.raises(InsufficientShares):
        auth.combine(0, dup, 3)
    with pytest.raises(ContentMismatch):
        auth.combine(0, [auth.share(0, b"D"), auth.share(1, b"E")], 2)


def test_combine_ignores_invalid_shares():
    auth = AuthModel(byzantine={3})
    shares = [auth.share(0, b"D"), auth.share(1, b"D"),
              auth.create(3, b"D", "share", valid=False)]
    with pytest.raises(InsufficientShares):
        auth.combine(0, shares, 3)


@given(st.permutations(range(6)))
def test_combine_order_insensitive(order):
    auth = AuthModel()
    shares = [auth.share(i, b"D") for i in range(6)]
    a = auth.combine(0, shares, 4)
    b = auth.combine(0, [shares[i] for i in order], 4)
    assert a == b


@given(st.lists(st.sampled_from(["sign", "verify", "share", "mac", "combine"]), max_size=40),
       st.integers(min_value=1, max_value=7))
def test_cost_ledger_is_exact(ops, recipients):
    costs = CryptoCosts(mac=2, sign=51, verify=83, share_sign=61, combine_base=11,
                        combine_per_share=7, verify_combined=97)
    auth = AuthModel(costs=costs)
    node = 0
    sig = auth.sign(1, b"x")
    shares = [auth.share(i, b"x") for i in range(1, 4)]
    for op in ops:
        if op == "sign":
            auth.sign(node, b"x")
        elif op == "verify":
            auth.verify(node, sig)
        elif op == "share":
            auth.share(node, b"x")
        elif op == "mac":
            auth.mac(node, b"x", range(recipients))
        else:
            auth.combine(node, shares, 3)
    assert auth.ledger[node].micros == auth.expected_micros(node)


def test_aggregate_merges_partial_certificates():
    auth = AuthModel()
    left = auth.aggregate(1, [auth.share(1, b"D"), auth.share(3, b"D")])
    right = auth.aggregate(2, [auth.share(2, b"D"), auth.share(4, b"D")])
    root = auth.aggregate(0, [left, right, auth.share(0, b"D")])
    assert root.signers == frozenset({0, 1, 2, 3, 4})
    assert auth.verify(5, root)
    with pytest.raises(ContentMismatch):
        auth.aggregate(0, [left, auth.share(0, b"E")])

"""Simulated authentication: MAC vectors, signatures and threshold signatures.

Security is a capability rule enforced by :class:`AuthModel`: only the model
issues envelopes, and it refuses to attribute an envelope to an honest node
other than the one asking. Costs are charged to a per-node ledger that the
simulator turns into CPU time.
"""

from __future__ import annotations

import enum
import itertools
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable


class AuthError(Exception):
    pass


class ForgeryRejected(AuthError):
    pass


class InsufficientShares(AuthError):
    pass


class ContentMismatch(AuthError):
    pass


class Scheme(str, enum.Enum):
    MAC_VECTOR = "mac_vector"
    SIGNATURE = "signature"
    SHARE = "share"
    COMBINED = "combined"


TRANSFERABLE = frozenset({Scheme.SIGNATURE, Scheme.COMBINED})


@dataclass
class CryptoCosts:
    """Simulated CPU microseconds per primitive. Declared defaults, not measured."""

    mac: int = 1
    sign: int = 50
    verify: int = 80
    share_sign: int = 60
    verify_share: int = 0           # shares are checked in bulk by combine
    combine_base: int = 10
    combine_per_share: int = 5
    verify_combined: int = 100

    def combine(self, shares: int) -> int:
        return self.combine_base + self.combine_per_share * shares


@dataclass
class CryptoSizes:
    """Bytes of authentication material per primitive."""

    mac: int = 16
    signature: int = 64
    share: int = 48
    combined: int = 48


@dataclass(frozen=True, slots=True)
class Envelope:
    sender: int
    digest: Hashable
    scheme: Scheme
    token: int
    recipients: tuple = ()
    signers: frozenset = frozenset()
    threshold: int = 0
    valid: bool = True

    @property
    def transferable(self) -> bool:
        return self.scheme in TRANSFERABLE


@dataclass
class OpLedger:
    counts: Counter = field(default_factory=Counter)
    micros: int = 0

    def charge(self, op: str, cost: int, units: int = 1) -> int:
        self.counts[op] += units
        self.micros += cost
        return cost


class AuthModel:
    """Issues and checks envelopes; keeps the per-node cost ledger."""

    GROUP = -1

    def __init__(self, byzantine: Iterable[int] = (), costs: CryptoCosts | None = None,
                 sizes: CryptoSizes | None = None, audit: bool = True):
        self.byzantine = frozenset(byzantine)
        self.costs = costs or CryptoCosts()
        self.sizes = sizes or CryptoSizes()
        self.ledger: dict[int, OpLedger] = defaultdict(OpLedger)
        self._tokens = itertools.count(1)
        self._audit = audit
        self._issued: dict[int, int] = {}
        self._combined: dict[tuple, int] = {}
        # called as hook(node, micros) for every charge; the simulator uses it
        # to turn crypto work into CPU time
        self.hook = None

    def _charge(self, node: int, op: str, cost: int, units: int = 1) -> None:
        self.ledger[node].charge(op, cost, units)
        if self.hook is not None:
            self.hook(node, cost)

    # -- capability checks

    def _authorize(self, creator: int, claimed: int | None) -> int:
        sender = creator if claimed is None else claimed
        if sender != creator:
            colluding = creator in self.byzantine and sender in self.byzantine
            if not colluding:
                raise ForgeryRejected(f"node {creator} cannot create envelopes as {sender}")
        return sender

    def _issue(self, **kw) -> Envelope:
        env = Envelope(token=next(self._tokens), **kw)
        if self._audit:
            self._issued[env.token] = env.sender
        return env

    def is_authentic(self, env: Envelope) -> bool:
        """True when the model issued this envelope to the sender it names."""
        if not self._audit:
            return True
        return self._issued.get(env.token) == env.sender

    # -- creation

    def create(self, creator: int, digest: Hashable, scheme: Scheme | str,
               recipients: Iterable[int] = (), as_sender: int | None = None,
               valid: bool = True) -> Envelope:
        scheme = Scheme(scheme)
        if scheme is Scheme.COMBINED:
            raise AuthError("combined certificates come from combine()")
        sender = self._authorize(creator, as_sender)
        if not valid and creator not in self.byzantine:
            raise AuthError("honest nodes only produce valid authenticators")
        recipients = tuple(recipients)
        if scheme is Scheme.MAC_VECTOR:
            units = max(1, len(recipients))
            self._charge(creator, "mac_create", self.costs.mac * units, units)
        elif scheme is Scheme.SIGNATURE:
            self._charge(creator, "sign", self.costs.sign)
        else:
            self._charge(creator, "share_sign", self.costs.share_sign)
        return self._issue(sender=sender, digest=digest, scheme=scheme,
                           recipients=recipients, valid=valid)

    def sign(self, creator: int, digest: Hashable) -> Envelope:
        return self.create(creator, digest, Scheme.SIGNATURE)

    def share(self, creator: int, digest: Hashable) -> Envelope:
        return self.create(creator, digest, Scheme.SHARE)

    def mac(self, creator: int, digest: Hashable, recipients: Iterable[int]) -> Envelope:
        return self.create(creator, digest, Scheme.MAC_VECTOR, recipients)

    # -- verification

    def _sound(self, env: Envelope) -> bool:
        return env.valid and self.is_authentic(env)

    def verify(self, node: int, env: Envelope) -> bool:
        if env.scheme is Scheme.MAC_VECTOR:
            self._charge(node, "mac_verify", self.costs.mac)
            return self._sound(env) and node in env.recipients
        if env.scheme is Scheme.SIGNATURE:
            self._charge(node, "verify", self.costs.verify)
            return self._sound(env)
        if env.scheme is Scheme.SHARE:
            self._charge(node, "verify_share", self.costs.verify_share)
            return self._sound(env)
        self._charge(node, "verify_combined", self.costs.verify_combined)
        return self._sound(env)

    def combine(self, node: int, shares: Iterable[Envelope], t: int) -> Envelope:
        """Aggregate >= t shares from distinct signers over one digest."""
        shares = list(shares)
        digests = {s.digest for s in shares}
        if len(digests) > 1:
            raise ContentMismatch(f"{len(digests)} distinct digests among shares")
        signers = frozenset(s.sender for s in shares
                            if s.scheme is Scheme.SHARE and self._sound(s))
        self._charge(node, "combine", self.costs.combine_base)
        self._charge(node, "combine_share", self.costs.combine_per_share * len(shares), len(shares))
        if len(signers) < max(t, 1):
            raise InsufficientShares(f"{len(signers)} distinct valid shares, need {t}")
        return self._combined_envelope(next(iter(digests)), signers, t)

    def aggregate(self, node: int, parts: Iterable[Envelope]) -> Envelope:
        """Merge shares and partial aggregates over one digest (tree voting)."""
        parts = list(parts)
        digests = {p.digest for p in parts}
        if len(digests) != 1:
            raise ContentMismatch(f"{len(digests)} distinct digests among parts")
        signers: set = set()
        for p in parts:
            if p.scheme is Scheme.SHARE and self._sound(p):
                signers.add(p.sender)
            elif p.scheme is Scheme.COMBINED and self._sound(p):
                signers |= p.signers
        self._charge(node, "combine", self.costs.combine_base)
        self._charge(node, "combine_share", self.costs.combine_per_share * len(parts), len(parts))
        if not signers:
            raise InsufficientShares("no valid parts")
        return self._combined_envelope(digests.pop(), frozenset(signers), len(signers))

    def _combined_envelope(self, digest, signers: frozenset, t: int) -> Envelope:
        # certificates over equal signer sets are interchangeable
        key = (digest, signers, t)
        token = self._combined.get(key)
        if token is None:
            token = self._combined[key] = next(self._tokens)
        env = Envelope(sender=self.GROUP, digest=digest, scheme=Scheme.COMBINED,
                       token=token, signers=signers, threshold=t)
        if self._audit:
            self._issued[token] = self.GROUP
        return env

    @staticmethod
    def assert_transferable(env: Envelope) -> bool:
        return env.transferable

    # -- sizing and accounting

    def size(self, env: Envelope) -> int:
        if env.scheme is Scheme.MAC_VECTOR:
            return self.sizes.mac * len(env.recipients)
        if env.scheme is Scheme.SIGNATURE:
            return self.sizes.signature
        if env.scheme is Scheme.SHARE:
            return self.sizes.share
        return self.sizes.combined

    def expected_micros(self, node: int) -> int:
        """Ledger total recomputed from operation counts and unit costs."""
        c = self.costs
        unit = {"mac_create": c.mac, "mac_verify": c.mac, "sign": c.sign,
                "verify": c.verify, "share_sign": c.share_sign,
                "verify_share": c.verify_share, "verify_combined": c.verify_combined,
                "combine": c.combine_base, "combine_share": c.combine_per_share}
        return sum(unit[op] * k for op, k in self.ledger[node].counts.items())

    def audit(self, envelopes: Iterable[Envelope]) -> list[Envelope]:
        """Envelopes naming an honest sender that the model never issued to it."""
        bad = []
        for env in envelopes:
            if env.sender == self.GROUP:
                ok = self._issued.get(env.token) == self.GROUP
            elif env.sender in self.byzantine:
                continue
            else:
                ok = self._issued.get(env.token) == env.sender
            if not ok:
                bad.append(env)
        return bad

    def config(self) -> dict:
        return {"costs": asdict(self.costs), "sizes": asdict(self.sizes)}

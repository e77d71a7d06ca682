"""Protocol design space: dimensions, descriptors, validity rules, design choices
and the constraint-checker query engine."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable, Iterable


class DesignSpaceError(Exception):
    pass


class MalformedDescriptor(DesignSpaceError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NotApplicable(DesignSpaceError):
    def __init__(self, choice: str, condition: str, step: int | None = None):
        where = f" (step {step})" if step is not None else ""
        super().__init__(f"{choice} not applicable{where}: {condition}")
        self.choice = choice
        self.condition = condition
        self.step = step


# --------------------------------------------------------------------------
# value sets

REPLICA_FORMULAS = ("2f+1", "3f+1", "4f+1", "5f-1", "5f+1", "7f+1")
TOPOLOGIES = ("star", "clique", "tree", "chain")
AUTHS = ("mac", "signature", "threshold", "mac|signature", "mac|threshold", "mixed")
TIMERS = tuple(f"t{i}" for i in range(1, 9))
STRATEGIES = ("pessimistic", "optimistic", "robust")
ASSUMPTIONS = tuple(f"a{i}" for i in range(1, 7))
VIEW_CHANGES = ("stable", "rotating")
RECOVERIES = ("none", "proactive", "reactive")
CLIENTS = ("requester", "proposer", "repairer")
FAIRNESS = ("none", "partial", "full")
OPTIMIZATIONS = ("O1", "O2")

TRANSFERABLE_AUTHS = {"signature", "threshold", "mac|signature", "mac|threshold", "mixed"}


@dataclass(frozen=True)
class ReplicaCount:
    formula: str

    def __post_init__(self):
        if self.formula not in REPLICA_FORMULAS:
            raise MalformedDescriptor("replicas", f"unknown formula {self.formula!r}")

    @property
    def coefficients(self) -> tuple[int, int]:
        a, rest = self.formula.split("f")
        return int(a), int(rest)

    def resolve(self, f: int) -> int:
        if f < 0:
            raise ValueError("f must be nonnegative")
        a, b = self.coefficients
        return a * f + b

    def solve_f(self, n: int) -> int | None:
        """Return f with resolve(f) == n, or None."""
        a, b = self.coefficients
        if (n - b) % a or n - b < 0:
            return None
        return (n - b) // a

    def __str__(self):
        return self.formula


@dataclass(frozen=True)
class ProtocolDescriptor:
    """One point in the design space (one Table-1 style row plus structure flags)."""

    name: str | None = None
    replicas: str = "3f+1"
    topology: str = "clique"
    auth: str = "signature"
    timers: frozenset = frozenset({"t1", "t2"})
    strategy: str = "pessimistic"
    assumptions: frozenset = frozenset()
    speculative: bool = False
    phases: int = 3
    per_height: bool = False
    preorder_phases: int = 0
    slow_phases: int | None = None
    view_change: str = "stable"
    recovery: str = "none"
    client: str = "requester"
    fairness: str = "none"
    gamma: Fraction | None = None
    load_balancing: bool = False
    optimizations: frozenset = frozenset()
    executable: bool = False
    # structure flags used by the rules and transforms
    quadratic_phases: int = 0
    relays_certificate: bool = False
    leader_sync: bool = False
    deferred_dissemination: bool = False
    trusted_hardware: bool = False

    def __post_init__(self):
        check_well_formed(self)

    @property
    def replica_count(self) -> ReplicaCount:
        return ReplicaCount(self.replicas)

    @property
    def responsive(self) -> bool:
        return "a6" not in self.assumptions

    def phase_label(self, slow: bool = False) -> str | None:
        value = self.slow_phases if slow else self.phases
        if value is None:
            return None
        text = f"{value}h" if self.per_height else str(value)
        if self.preorder_phases and not slow:
            text = f"{self.preorder_phases}+{text}"
        return text

    def good_case_phases(self, h: int = 1) -> int:
        return self.preorder_phases + self.phases * (h if self.per_height else 1)

    def row(self) -> dict:
        """The Table-1 dimensions of this point, as comparable plain values."""
        return {
            "replicas": self.replicas,
            "topology": self.topology,
            "auth": self.auth,
            "timers": tuple(sorted(self.timers)),
            "strategy": self.strategy,
            "assumptions": tuple(sorted(self.assumptions)),
            "speculative": self.speculative,
            "phases": self.phase_label(),
            "slow_phases": self.phase_label(slow=True),
            "view_change": self.view_change,
            "recovery": self.recovery,
            "client": self.client,
            "fairness": self.fairness,
            "load_balancing": self.load_balancing,
        }


def check_well_formed(d: ProtocolDescriptor) -> None:
    def member(name, value, allowed):
        if value not in allowed:
            raise MalformedDescriptor(name, f"{value!r} not in {allowed}")

    member("replicas", d.replicas, REPLICA_FORMULAS)
    member("topology", d.topology, TOPOLOGIES)
    member("auth", d.auth, AUTHS)
    member("strategy", d.strategy, STRATEGIES)
    member("view_change", d.view_change, VIEW_CHANGES)
    member("recovery", d.recovery, RECOVERIES)
    member("client", d.client, CLIENTS)
    member("fairness", d.fairness, FAIRNESS)
    for t in d.timers:
        member("timers", t, TIMERS)
    for a in d.assumptions:
        member("assumptions", a, ASSUMPTIONS)
    for o in d.optimizations:
        member("optimizations", o, OPTIMIZATIONS)
    if not isinstance(d.phases, int) or d.phases < 1:
        raise MalformedDescriptor("phases", "must be a positive integer")
    if d.slow_phases is not None and d.slow_phases < d.phases:
        raise MalformedDescriptor("slow_phases", "slow path shorter than good case")
    if d.strategy != "optimistic" and d.assumptions:
        raise MalformedDescriptor("assumptions", "only optimistic protocols carry assumptions")
    if d.speculative and d.strategy != "optimistic":
        raise MalformedDescriptor("speculative", "speculation requires an optimistic strategy")
    if d.per_height and d.topology != "tree":
        raise MalformedDescriptor("phases", "per-height phase counts need a tree topology")
    if d.topology == "tree" and not d.load_balancing:
        raise MalformedDescriptor("load_balancing", "tree topologies balance load")
    if d.fairness == "full":
        if d.gamma is None or not (Fraction(1, 2) < Fraction(d.gamma) <= 1):
            raise MalformedDescriptor("gamma", "fairness needs 0.5 < gamma <= 1")


# --------------------------------------------------------------------------
# validity rules

def fairness_bound_holds(formula: str, gamma) -> bool:
    """n > 4f/(2*gamma - 1) for every f >= 1, with n = a*f + b."""
    a, b = ReplicaCount(formula).coefficients
    g = Fraction(gamma)
    if g <= Fraction(1, 2):
        return False
    k = Fraction(4) / (2 * g - 1)
    # a*f + b > k*f  <=>  (a - k) f + b > 0 for all f >= 1
    if a - k >= 0:
        return (a - k) + b > 0
    return False


def _rule_violations(d: ProtocolDescriptor) -> Iterable[str]:
    if d.strategy == "pessimistic" and not d.per_height and d.phases <= 2 and d.replicas == "3f+1":
        yield "R1"
    if d.strategy == "pessimistic" and not d.per_height and d.phases == 2:
        # 7f+1 is accepted as a superset of the 5f+1 requirement
        ok = d.replicas in ("5f+1", "7f+1") or (
            d.replicas == "5f-1" and d.auth in ("signature", "threshold"))
        if not ok:
            yield "R2"
    if d.topology in ("star", "tree") and d.relays_certificate and d.auth not in TRANSFERABLE_AUTHS:
        yield "R3"
    if d.fairness == "full" and not fairness_bound_holds(d.replicas, d.gamma):
        yield "R4"
    if d.view_change == "rotating" and d.responsive and not d.leader_sync:
        yield "R5"
    if d.replicas == "2f+1" and not d.trusted_hardware:
        yield "R6"
    if d.load_balancing and d.topology != "tree":
        yield "R7"


def validate_point(d: ProtocolDescriptor) -> tuple[str, str | None]:
    """Return ("invalid", rule), ("valid", template name) or ("unverified", None)."""
    check_well_formed(d)
    for rule in _rule_violations(d):
        return "invalid", rule
    name = match_template(d)
    if name is not None:
        return "valid", name
    return "unverified", None


# --------------------------------------------------------------------------
# templates (catalogue rows, plus the Linear PBFT intermediate and two
# descriptor-only points that appear only as derivation waypoints)

def _d(**kw) -> ProtocolDescriptor:
    for key in ("timers", "assumptions", "optimizations"):
        if key in kw:
            kw[key] = frozenset(kw[key])
    return ProtocolDescriptor(**kw)


_T12 = {"t1", "t2"}

TEMPLATES: dict[str, ProtocolDescriptor] = {
    "PBFT": _d(name="PBFT", replicas="3f+1", topology="clique", auth="mac|signature",
               timers={"t1", "t2", "t8"}, phases=3, recovery="proactive",
               quadratic_phases=2, optimizations={"O1"}, executable=True),
    "Zyzzyva": _d(name="Zyzzyva", topology="star", auth="mac|signature", timers=_T12,
                  strategy="optimistic", assumptions={"a1", "a2"}, speculative=True,
                  phases=1, slow_phases=3, client="repairer", optimizations={"O1"},
                  executable=True),
    "Zyzzyva5": _d(name="Zyzzyva5", replicas="5f+1", topology="star", auth="mac|signature",
                   timers=_T12, strategy="optimistic", assumptions={"a1"}, speculative=True,
                   phases=1, slow_phases=3, client="repairer", optimizations={"O1"},
                   executable=True),
    "PoE": _d(name="PoE", topology="star", auth="mac|threshold", timers=_T12,
              strategy="optimistic", assumptions={"a2"}, speculative=True, phases=3,
              relays_certificate=True, optimizations={"O1"}, executable=True),
    "SBFT": _d(name="SBFT", topology="star", auth="threshold", timers={"t1", "t2", "t3"},
               strategy="optimistic", assumptions={"a2"}, phases=3, slow_phases=5,
               relays_certificate=True, optimizations={"O1"}, executable=True),
    "HotStuff": _d(name="HotStuff", topology="star", auth="threshold", timers=_T12,
                   phases=7, view_change="rotating", relays_certificate=True,
                   leader_sync=True, optimizations={"O2"}, executable=True),
    "Tendermint": _d(name="Tendermint", topology="clique", auth="signature",
                     timers={"t1", "t2", "t5", "t6"}, strategy="optimistic",
                     assumptions={"a6"}, phases=3, view_change="rotating",
                     quadratic_phases=2),
    "Themis": _d(name="Themis", replicas="4f+1", topology="star", auth="threshold",
                 timers={"t1", "t2", "t6"}, phases=7, preorder_phases=1,
                 view_change="rotating", fairness="full", gamma=Fraction(1),
                 relays_certificate=True, leader_sync=True, optimizations={"O2"},
                 executable=True),
    "Kauri": _d(name="Kauri", topology="tree", auth="threshold", timers=_T12,
                strategy="optimistic", assumptions={"a3"}, phases=7, per_height=True,
                load_balancing=True, relays_certificate=True, leader_sync=True,
                optimizations={"O2"}, executable=True),
    "CheapBFT": _d(name="CheapBFT", replicas="2f+1", topology="clique", auth="mac",
                   timers=_T12, strategy="optimistic", assumptions={"a2"}, phases=3,
                   quadratic_phases=2, trusted_hardware=True),
    "FaB": _d(name="FaB", replicas="5f+1", topology="clique", auth="mixed", timers=_T12,
              phases=2, quadratic_phases=1, optimizations={"O1"}, executable=True),
    "Prime": _d(name="Prime", topology="clique", auth="signature",
                timers={"t1", "t2", "t6", "t7"}, strategy="robust", phases=6,
                fairness="partial", quadratic_phases=2),
    "Q/U": _d(name="Q/U", replicas="5f+1", topology="star", auth="mac", timers=_T12,
              strategy="optimistic", assumptions={"a4", "a5"}, phases=1, slow_phases=3,
              client="repairer"),
    "FLB": _d(name="FLB", replicas="5f-1", topology="star", auth="signature", timers=_T12,
              phases=2, relays_certificate=True, deferred_dissemination=True,
              optimizations={"O1"}, executable=True),
    "FTB": _d(name="FTB", replicas="5f-1", topology="tree", auth="threshold", timers=_T12,
              strategy="optimistic", assumptions={"a3"}, phases=3, per_height=True,
              load_balancing=True, relays_certificate=True, optimizations={"O2"},
              executable=True),
}

TABLE_ORDER = list(TEMPLATES)

# Derivation waypoints that are not rows of the comparison table.
WAYPOINTS: dict[str, ProtocolDescriptor] = {
    "Linear PBFT": _d(name="Linear PBFT", topology="star", auth="threshold", timers=_T12,
                      phases=5, relays_certificate=True),
    "Quorum": _d(name="Quorum", topology="star", auth="mac", timers=_T12,
                 strategy="optimistic", assumptions={"a2", "a4", "a5"}, phases=1,
                 slow_phases=3, client="repairer"),
    "Bosco": _d(name="Bosco", replicas="7f+1", topology="clique", auth="mixed", timers=_T12,
                phases=2, quadratic_phases=1),
}

# The comparison table lists FLB with a clique topology although FLB is a
# linear (star) protocol; the tabulated point is accepted as a valid alias.
TABULATED_ALIASES: dict[str, ProtocolDescriptor] = {
    "FLB": replace(TEMPLATES["FLB"], topology="clique"),
}

EXECUTABLE = [name for name, d in TEMPLATES.items() if d.executable]


def _core(d: ProtocolDescriptor) -> tuple:
    return tuple(sorted(d.row().items()))


_TEMPLATE_CORES: dict[tuple, str] = {}
for _name, _t in itertools.chain(TEMPLATES.items(), WAYPOINTS.items(),
                                 TABULATED_ALIASES.items()):
    _TEMPLATE_CORES.setdefault(_core(_t), _name)


def match_template(d: ProtocolDescriptor) -> str | None:
    return _TEMPLATE_CORES.get(_core(d))


def get_template(name: str) -> ProtocolDescriptor:
    for table in (TEMPLATES, WAYPOINTS):
        for key, d in table.items():
            if key.lower() == name.lower():
                return d
    raise KeyError(f"unknown protocol {name!r}; known: {', '.join(TEMPLATES)}")


# --------------------------------------------------------------------------
# design choices

@dataclass(frozen=True)
class DesignChoice:
    id: str
    name: str
    domain_predicate: Callable[[ProtocolDescriptor], bool] = field(compare=False)
    transform: Callable[[ProtocolDescriptor], ProtocolDescriptor] = field(compare=False)
    condition: str = ""


def _carry(d: ProtocolDescriptor, **changes) -> ProtocolDescriptor:
    # recovery stages are not inherited by derived protocols
    changes.setdefault("recovery", "none")
    changes.setdefault("timers", d.timers - {"t8"})
    changes.setdefault("name", None)
    changes.setdefault("executable", False)
    return replace(d, **changes)


def _is_fast(d):
    return d.replicas in ("5f+1", "5f-1")


def _linear(d):
    return d.topology == "star" and d.relays_certificate and d.quadratic_phases == 0


def _linearize(d):
    q = d.quadratic_phases
    if _is_fast(d):
        # final collector->all step is piggybacked; signatures allow 5f-1
        return _carry(d, topology="star", quadratic_phases=0, phases=d.phases + q - 1,
                      deferred_dissemination=True, replicas="5f-1", auth="signature",
                      relays_certificate=True)
    return _carry(d, topology="star", quadratic_phases=0, phases=d.phases + q,
                  auth="threshold", relays_certificate=True)


def _phase_reduce(d):
    if _linear(d):
        return _carry(d, replicas="5f-1", phases=d.phases - 3, auth="signature",
                      deferred_dissemination=True)
    return _carry(d, replicas="5f+1", phases=d.phases - 1,
                  quadratic_phases=d.quadratic_phases - 1, auth="mixed")


def _rotate(d):
    if d.topology == "clique":
        return _carry(d, view_change="rotating", leader_sync=True, phases=d.phases + 1,
                      quadratic_phases=d.quadratic_phases + 1)
    return _carry(d, view_change="rotating", leader_sync=True, phases=d.phases + 2)


def _nonresponsive_rotate(d):
    return _carry(d, view_change="rotating", strategy="optimistic",
                  assumptions=d.assumptions | {"a6"}, auth="signature",
                  timers=(d.timers - {"t8"}) | {"t5", "t6"})


def _replica_reduce(d):
    return _carry(d, replicas="2f+1", trusted_hardware=True, strategy="optimistic",
                  assumptions=d.assumptions | {"a2"}, auth="mac")


def _optimistic_reduce(d):
    return _carry(d, phases=d.phases - 2, slow_phases=d.phases, strategy="optimistic",
                  assumptions=d.assumptions | {"a2"}, speculative=False,
                  timers=(d.timers - {"t8"}) | {"t3"})


def _speculative_reduce(d):
    return _carry(d, phases=d.phases - 2, strategy="optimistic",
                  assumptions=d.assumptions | {"a2"}, speculative=True,
                  auth="mac|threshold")


def _speculative_execute(d):
    return _carry(d, phases=1, slow_phases=3, topology="star", quadratic_phases=0,
                  strategy="optimistic", assumptions=frozenset({"a1", "a2"}),
                  speculative=True, client="repairer")


def _conflict_free(d):
    return _carry(d, phases=1, slow_phases=3, topology="star", quadratic_phases=0,
                  auth="mac", strategy="optimistic",
                  assumptions=frozenset({"a2", "a4", "a5"}), speculative=False,
                  client="repairer")


def _resilience(d):
    grown = {"3f+1": "5f+1", "5f+1": "7f+1"}[d.replicas]
    assumptions = d.assumptions - {"a2"}
    strategy = d.strategy
    speculative = d.speculative
    if strategy == "optimistic" and not assumptions:
        strategy, speculative = "pessimistic", False
    return _carry(d, replicas=grown, assumptions=assumptions, strategy=strategy,
                  speculative=speculative)


def _authenticate(d):
    if d.topology in ("star", "tree"):
        return _carry(d, auth="threshold")
    return _carry(d, auth="signature")


def _robust(d):
    return _carry(d, strategy="robust", phases=d.phases + 3, fairness="partial",
                  auth="signature", timers=(d.timers - {"t8"}) | {"t6", "t7"})


def _fair(d):
    return _carry(d, fairness="full", gamma=Fraction(1), preorder_phases=1,
                  replicas="4f+1", timers=(d.timers - {"t8"}) | {"t6"})


def _load_balance(d):
    phases = d.phases + (1 if d.deferred_dissemination else 0)
    if d.strategy == "pessimistic":
        strategy, assumptions = "optimistic", frozenset({"a3"})
    else:
        strategy, assumptions = d.strategy, d.assumptions | {"a3"}
    return _carry(d, topology="tree", per_height=True, phases=phases, load_balancing=True,
                  auth="threshold", view_change="stable", strategy=strategy,
                  assumptions=assumptions, deferred_dissemination=False)


CHOICES: dict[str, DesignChoice] = {}


def _register(id_, name, predicate, transform, condition):
    CHOICES[id_] = DesignChoice(id_, name, predicate, transform, condition)


_register("DC1", "linearization",
          lambda d: d.topology == "clique" and d.quadratic_phases >= 1,
          _linearize, "needs a clique protocol with a quadratic phase")
_register("DC2", "phase-reduction",
          lambda d: d.replicas == "3f+1" and d.strategy == "pessimistic" and (
              (d.topology == "clique" and d.quadratic_phases >= 2) or
              (_linear(d) and d.phases >= 5 and not d.leader_sync)),
          _phase_reduce, "needs a pessimistic 3f+1 protocol with three ordering phases")
_register("DC3", "leader-rotation", lambda d: d.view_change == "stable" and not d.per_height,
          _rotate, "needs a stable-leader protocol")
_register("DC4", "nonresponsive-rotation",
          lambda d: d.view_change == "stable" and d.strategy == "pessimistic",
          _nonresponsive_rotate, "needs a pessimistic stable-leader protocol")
_register("DC5", "replica-reduction",
          lambda d: d.replicas == "3f+1" and d.strategy == "pessimistic",
          _replica_reduce, "needs a pessimistic 3f+1 protocol")
_register("DC6", "optimistic-phase-reduction",
          lambda d: _linear(d) and d.strategy == "pessimistic" and d.phases >= 5
          and d.view_change == "stable",
          _optimistic_reduce, "needs a pessimistic linear stable-leader protocol")
_register("DC7", "speculative-phase-reduction",
          lambda d: _linear(d) and d.strategy == "pessimistic" and d.phases >= 5
          and d.view_change == "stable",
          _speculative_reduce, "needs a pessimistic linear stable-leader protocol")
_register("DC8", "speculative-execution",
          lambda d: d.strategy == "pessimistic" and d.topology == "clique"
          and d.quadratic_phases == 2,
          _speculative_execute, "needs a pessimistic protocol with prepare and commit phases")
_register("DC9", "conflict-free",
          lambda d: d.strategy == "pessimistic" and d.topology == "clique",
          _conflict_free, "needs a pessimistic clique protocol")
_register("DC10", "resilience", lambda d: d.replicas in ("3f+1", "5f+1"),
          _resilience, "needs 3f+1 or 5f+1 replicas")
_register("DC11", "authentication", lambda d: d.auth != "threshold",
          _authenticate, "already uses threshold signatures")
_register("DC12", "robust", lambda d: d.strategy == "pessimistic" and d.fairness == "none",
          _robust, "needs a pessimistic unfair protocol")
_register("DC13", "fair", lambda d: d.fairness == "none" and d.strategy != "robust",
          _fair, "needs a protocol without order-fairness")
_register("DC14", "load-balancer",
          lambda d: d.topology == "star" and d.relays_certificate and d.strategy != "robust",
          _load_balance, "needs a non-robust star protocol that relays certificates")

_BY_NAME = {c.name: c for c in CHOICES.values()}


def get_choice(key: str) -> DesignChoice:
    if key.upper() in CHOICES:
        return CHOICES[key.upper()]
    if key.lower() in _BY_NAME:
        return _BY_NAME[key.lower()]
    raise KeyError(f"unknown design choice {key!r}")


def _named(d: ProtocolDescriptor) -> ProtocolDescriptor:
    name = match_template(d)
    if name is None:
        return d
    template = TEMPLATES.get(name) or WAYPOINTS.get(name)
    if template is None:
        return replace(d, name=name)
    return replace(d, name=name, executable=template.executable,
                   optimizations=template.optimizations)


def apply_choice(d: ProtocolDescriptor, choice: DesignChoice | str,
                 step: int | None = None) -> ProtocolDescriptor:
    c = get_choice(choice) if isinstance(choice, str) else choice
    if not c.domain_predicate(d):
        raise NotApplicable(c.id, c.condition, step)
    try:
        out = _named(c.transform(d))
    except MalformedDescriptor as exc:
        raise NotApplicable(c.id, f"result is malformed ({exc})", step) from None
    status, rule = validate_point(out)
    if status == "invalid":
        raise NotApplicable(c.id, f"result violates {rule}", step)
    return out


def derive_chain(start: ProtocolDescriptor | str,
                 chain: Iterable[DesignChoice | str]) -> ProtocolDescriptor:
    d = get_template(start) if isinstance(start, str) else start
    for i, c in enumerate(chain):
        d = apply_choice(d, c, step=i)
    return _named(d)


# Derivation chains from PBFT for each tabulated protocol.
DERIVATIONS: dict[str, tuple[str, ...]] = {
    "Zyzzyva": ("DC8",),
    "Zyzzyva5": ("DC8", "DC10"),
    "Linear PBFT": ("DC1",),
    "PoE": ("DC1", "DC7"),
    "SBFT": ("DC1", "DC6"),
    "HotStuff": ("DC1", "DC3"),
    "Tendermint": ("DC4",),
    "Themis": ("DC1", "DC3", "DC13"),
    "Kauri": ("DC1", "DC3", "DC14"),
    "CheapBFT": ("DC5",),
    "FaB": ("DC2",),
    "Prime": ("DC12",),
    "Quorum": ("DC9",),
    "Q/U": ("DC9", "DC10"),
    "Bosco": ("DC2", "DC10"),
    "FLB": ("DC1", "DC2"),
    "FTB": ("DC1", "DC2", "DC14"),
}


# --------------------------------------------------------------------------
# constraint checker

QUERY_AXES = ("replicas", "topology", "auth", "strategy", "speculative", "phases",
              "view_change", "fairness", "load_balancing")


@dataclass(frozen=True)
class Query:
    """Partial assignment of dimensions; absent keys are unspecified."""

    values: tuple = ()

    @classmethod
    def of(cls, **kw) -> "Query":
        kw = _normalize_query(kw)
        for key, value in kw.items():
            _check_query_value(key, value)
        return cls(tuple(sorted(kw.items())))

    def as_dict(self) -> dict:
        return dict(self.values)


_QUERY_SETS = {
    "replicas": REPLICA_FORMULAS, "topology": TOPOLOGIES, "auth": AUTHS,
    "strategy": STRATEGIES, "view_change": VIEW_CHANGES, "recovery": RECOVERIES,
    "client": CLIENTS, "fairness": FAIRNESS,
}


def _normalize_query(q: dict) -> dict:
    out = dict(q)
    if isinstance(out.get("fairness"), bool):
        out["fairness"] = "full" if out["fairness"] else "none"
    for key in ("timers", "assumptions", "optimizations"):
        if key in out and isinstance(out[key], str):
            out[key] = tuple(v for v in out[key].split(",") if v)
    return out


def _check_query_value(key, value):
    if key in _QUERY_SETS:
        if value not in _QUERY_SETS[key]:
            raise MalformedDescriptor(key, f"{value!r} not in {_QUERY_SETS[key]}")
    elif key in ("speculative", "load_balancing"):
        if not isinstance(value, bool):
            raise MalformedDescriptor(key, "expected a boolean")
    elif key in ("phases", "slow_phases"):
        if value is not None and _parse_phase_text(str(value)) is None:
            raise MalformedDescriptor(key, "expected '<k>', '<k>h' or '<p>+<k>'")
    elif key == "gamma":
        Fraction(value)
    elif key in ("timers", "assumptions", "optimizations"):
        allowed = {"timers": TIMERS, "assumptions": ASSUMPTIONS,
                   "optimizations": OPTIMIZATIONS}[key]
        for item in value:
            if item not in allowed:
                raise MalformedDescriptor(key, f"{item!r} not in {allowed}")
    else:
        raise MalformedDescriptor(key, "unknown dimension")


def _matches(d: ProtocolDescriptor, q: dict) -> bool:
    for key, value in q.items():
        if key in ("phases", "slow_phases"):
            if _phase_text(value) != d.phase_label(slow=key == "slow_phases"):
                return False
        elif key == "gamma":
            if d.gamma is None or Fraction(d.gamma) != Fraction(value):
                return False
        elif key in ("timers", "assumptions", "optimizations"):
            if getattr(d, key) != frozenset(value):
                return False
        elif getattr(d, key) != value:
            return False
    return True


_PHASE_RE = re.compile(r"^(?:(\d+)\+)?(\d+)(h?)$")


def _parse_phase_text(text: str) -> tuple[int, int, bool] | None:
    """'1+7' -> (1, 7, False); '7h' -> (0, 7, True)."""
    m = _PHASE_RE.match(text.strip())
    if not m or int(m.group(2)) < 1:
        return None
    return int(m.group(1) or 0), int(m.group(2)), bool(m.group(3))


def _phase_text(value) -> str | None:
    return None if value is None else str(value)


def _enumerate_points(q: dict) -> Iterable[ProtocolDescriptor]:
    def axis(key, values):
        return (q[key],) if key in q else values

    phase_values = [str(p) for p in range(1, 8)]
    for replicas, topology, auth, strategy, speculative, view_change, fairness, lb in itertools.product(
            axis("replicas", REPLICA_FORMULAS), axis("topology", TOPOLOGIES),
            axis("auth", AUTHS), axis("strategy", STRATEGIES),
            axis("speculative", (False, True)), axis("view_change", VIEW_CHANGES),
            axis("fairness", FAIRNESS), axis("load_balancing", (False, True))):
        if speculative and strategy != "optimistic":
            continue
        if "phases" in q:
            phases_iter = [str(q["phases"])]
        elif topology == "tree":
            phases_iter = [p + "h" for p in phase_values]
        else:
            phases_iter = phase_values
        for p in phases_iter:
            preorder, count, per_height = _parse_phase_text(p)
            if per_height and topology != "tree":
                continue
            linear = topology in ("star", "tree")
            gamma = Fraction(q.get("gamma", 1)) if fairness == "full" else None
            try:
                yield ProtocolDescriptor(
                    replicas=replicas, topology=topology, auth=auth,
                    timers=frozenset(q.get("timers", {"t1", "t2"})),
                    strategy=strategy, assumptions=frozenset(q.get("assumptions", ())),
                    speculative=speculative, phases=count, preorder_phases=preorder,
                    per_height=per_height, view_change=view_change,
                    recovery=q.get("recovery", "none"), client=q.get("client", "requester"),
                    fairness=fairness, gamma=gamma, load_balancing=lb,
                    relays_certificate=linear, leader_sync=view_change == "rotating" and linear,
                    trusted_hardware=replicas == "2f+1",
                    quadratic_phases=0 if linear else min(count, 2))
            except MalformedDescriptor:
                continue


def query(q: Query | dict | None = None) -> list[tuple[ProtocolDescriptor, str]]:
    """All non-invalid points satisfying the query: named protocols first
    (table order), then unverified points in lexicographic order."""
    qd = q.as_dict() if isinstance(q, Query) else _normalize_query(q or {})
    for key, value in qd.items():
        _check_query_value(key, value)
    named = []
    for name in TABLE_ORDER:
        d = TEMPLATES[name]
        if _matches(d, qd) and validate_point(d)[0] != "invalid":
            named.append((d, "valid"))
    seen = {_core(d) for d, _ in named}
    others = []
    for d in _enumerate_points(qd):
        if not _matches(d, qd):
            continue
        status, _ = validate_point(d)
        if status != "unverified":
            continue
        key = _core(d)
        if key in seen:
            continue
        seen.add(key)
        others.append((d, status))
    others.sort(key=lambda item: _sort_key(item[0]))
    return named + others


def _sort_key(d: ProtocolDescriptor) -> tuple:
    return tuple(str(v) for _, v in sorted(d.row().items()))


# --------------------------------------------------------------------------
# serialization: one "key = value" line per dimension

_SET_FIELDS = ("timers", "assumptions", "optimizations")
_BOOL_FIELDS = ("speculative", "per_height", "load_balancing", "executable",
                "relays_certificate", "leader_sync", "deferred_dissemination",
                "trusted_hardware")


def dumps(d: ProtocolDescriptor) -> str:
    lines = []
    for f in fields(ProtocolDescriptor):
        value = getattr(d, f.name)
        if f.name in _SET_FIELDS:
            text = ",".join(sorted(value))
        elif f.name in _BOOL_FIELDS:
            text = "true" if value else "false"
        elif value is None:
            text = "-"
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ProtocolDescriptor:
    known = {f.name for f in fields(ProtocolDescriptor)}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedDescriptor(f"line {lineno}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise MalformedDescriptor(key, "unknown dimension")
        if key in _SET_FIELDS:
            kw[key] = frozenset(v for v in value.split(",") if v)
        elif key in _BOOL_FIELDS:
            if value not in ("true", "false"):
                raise MalformedDescriptor(key, "expected true or false")
            kw[key] = value == "true"
        elif value == "-":
            kw[key] = None
        elif key in ("phases", "preorder_phases", "quadratic_phases", "slow_phases"):
            try:
                kw[key] = int(value)
            except ValueError:
                raise MalformedDescriptor(key, "expected an integer") from None
        elif key == "gamma":
            kw[key] = Fraction(value)
        else:
            kw[key] = value
    return ProtocolDescriptor(**kw)

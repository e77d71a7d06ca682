"""Executable protocol parameterizations: phase tables, thresholds, reply
policies and tree layouts, plus the replica classes that run them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from ..design_space import (EXECUTABLE, ProtocolDescriptor, ReplicaCount, get_template,
                            match_template)


class ProtocolError(ValueError):
    pass


class DescriptorOnly(ProtocolError):
    """The descriptor is representable in the design space but has no runtime."""


class ThresholdError(ProtocolError):
    pass


class Unreconfigurable(ProtocolError):
    pass


@dataclass(frozen=True)
class Phase:
    name: str
    direction: str          # leader->all, all->all, all->collector, collector->all, up-tree, down-tree
    threshold: str          # expression in n and f, or "-" for one-to-many steps
    auth: str
    action: str


@dataclass(frozen=True)
class ReplyPolicy:
    fast: int
    slow: int | None = None         # repairer threshold for a commit certificate
    acks: int | None = None         # local-commit acknowledgements after repair
    combined: bool = False          # a single threshold-signed reply suffices
    contact: str = "leader"         # "leader" or "all"


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    descriptor: ProtocolDescriptor
    n: int
    f: int
    phases: tuple
    slow_suffix: tuple = ()
    switch: str | None = None
    reply: ReplyPolicy = ReplyPolicy(1)
    thresholds: dict = field(default_factory=dict)
    preorder: tuple = ()

    def good_case_length(self) -> int:
        """Phase-table length in first-learner steps (tree legs count once)."""
        return len(self.preorder) + len(self.phases)

    def replica_class(self):
        from .registry import REPLICAS
        return REPLICAS[self.name]


def _eval(expr: str, n: int, f: int) -> int:
    return int(eval(expr, {"__builtins__": {}}, {"n": n, "f": f}))


# phase tables: (name, direction, threshold, auth, action)
_P = Phase
PHASES: dict[str, tuple] = {
    "PBFT": (_P("pre-prepare", "leader->all", "-", "mac", "accept and prepare"),
             _P("prepare", "all->all", "2*f", "mac", "prepared; broadcast commit"),
             _P("commit", "all->all", "2*f+1", "mac", "commit; execute; reply")),
    "Zyzzyva": (_P("order-request", "leader->all", "-", "signature",
                   "speculatively execute; reply"),),
    "Zyzzyva5": (_P("order-request", "leader->all", "-", "signature",
                    "speculatively execute; reply"),),
    "FaB": (_P("propose", "leader->all", "-", "mac", "accept"),
            _P("accept", "all->all", "4*f+1", "mac", "commit; execute; reply")),
    "SBFT": (_P("pre-prepare", "leader->all", "-", "signature", "sign share"),
             _P("sign-share", "all->collector", "n", "threshold", "combine full proof"),
             _P("full-commit-proof", "collector->all", "-", "threshold",
                "commit; execute; share result")),
    "PoE": (_P("propose", "leader->all", "-", "signature", "sign share"),
            _P("support", "all->collector", "2*f+1", "threshold", "combine certificate"),
            _P("certify", "collector->all", "-", "threshold",
               "speculatively execute; reply")),
    "HotStuff": tuple(_P(f"{'propose' if i % 2 == 0 else 'vote'}-{i // 2 + 1}",
                         "leader->all" if i % 2 == 0 else "all->collector",
                         "-" if i % 2 == 0 else "n-f", "threshold",
                         "extend highest QC" if i % 2 == 0 else "next leader forms QC")
                      for i in range(7)),
    "Kauri": tuple(_P(f"{'disseminate' if i % 2 == 0 else 'aggregate'}-{i // 2 + 1}",
                      "down-tree" if i % 2 == 0 else "up-tree",
                      "-" if i % 2 == 0 else "n-f", "threshold",
                      "decide" if i == 6 else ("forward" if i % 2 == 0 else "combine"))
                   for i in range(7)),
    "FLB": (_P("propose", "leader->all", "-", "signature", "vote"),
            _P("vote", "all->collector", "n-f", "signature", "leader holds certificate")),
    "FTB": (_P("propose", "down-tree", "-", "signature", "vote"),
            _P("vote", "up-tree", "n-f", "threshold", "root holds certificate"),
            _P("certificate", "down-tree", "-", "threshold", "commit; execute; reply")),
}
PHASES["Themis"] = PHASES["HotStuff"]

SLOW_SUFFIX = {
    "Zyzzyva": (_P("spec-reply", "all->client", "2*f+1", "signature", "client builds certificate"),
                _P("commit-certificate", "client->all", "2*f+1", "signature",
                   "commit; local-commit ack")),
    "Zyzzyva5": (_P("spec-reply", "all->client", "3*f+1", "signature",
                    "client builds certificate"),
                 _P("commit-certificate", "client->all", "3*f+1", "signature",
                    "commit; local-commit ack")),
    "SBFT": (_P("prepare-proof", "collector->all", "2*f+1", "threshold", "commit share"),
             _P("commit-share", "all->collector", "2*f+1", "threshold", "combine commit proof"),
             _P("commit-proof", "collector->all", "-", "threshold", "commit; execute")),
}

SWITCH = {"Zyzzyva": "t1", "Zyzzyva5": "t1", "SBFT": "t3"}

PREORDER = {"Themis": (_P("preorder", "all->leader", "n-f", "signature",
                          "fair-order the collected batches"),)}


def _thresholds(name: str, n: int, f: int) -> dict:
    t = {
        "PBFT": {"prepare": 2 * f, "commit": 2 * f + 1, "reply": f + 1},
        "Zyzzyva": {"reply": 3 * f + 1, "reply_slow": 2 * f + 1, "local_commit": 2 * f + 1},
        "Zyzzyva5": {"reply": 4 * f + 1, "reply_slow": 3 * f + 1, "local_commit": 3 * f + 1},
        "FaB": {"accept": 4 * f + 1, "reply": f + 1},
        "SBFT": {"sign_share": n, "prepare": 2 * f + 1, "commit_share": 2 * f + 1,
                 "execute_share": f + 1, "reply": 1},
        "PoE": {"support": 2 * f + 1, "reply": 2 * f + 1},
        "HotStuff": {"vote": n - f, "new_view": n - f, "reply": f + 1},
        "Themis": {"preorder": n - f, "vote": n - f, "new_view": n - f, "reply": f + 1},
        "Kauri": {"vote": n - f, "reply": f + 1},
        "FLB": {"vote": n - f, "reply": f + 1},
        "FTB": {"vote": n - f, "reply": f + 1},
    }[name]
    t["view_change"] = n - f
    t["checkpoint"] = 2 * f + 1
    return t


def _reply_policy(name: str, t: dict) -> ReplyPolicy:
    if name in ("Zyzzyva", "Zyzzyva5"):
        return ReplyPolicy(t["reply"], t["reply_slow"], t["local_commit"])
    if name == "SBFT":
        return ReplyPolicy(1, combined=True)
    contact = "all" if name in ("HotStuff", "Themis") else "leader"
    return ReplyPolicy(t["reply"], contact=contact)


def resolve_name(protocol: str | ProtocolDescriptor) -> tuple[str, ProtocolDescriptor]:
    if isinstance(protocol, ProtocolDescriptor):
        name = match_template(protocol)
        if name is None or not protocol.executable or name not in EXECUTABLE:
            raise DescriptorOnly(
                f"descriptor {protocol.name or '?'} has no runtime; use the design-space "
                f"tools (query/validate) for it")
        return name, get_template(name)
    try:
        d = get_template(protocol)
    except KeyError:
        raise ProtocolError(f"unknown protocol {protocol!r}; known: {', '.join(EXECUTABLE)}")
    if not d.executable:
        raise DescriptorOnly(f"{d.name} is descriptor-only; use the design-space tools for it")
    return d.name, d


def quorum_thresholds(protocol: str | ProtocolDescriptor, n: int, f: int) -> dict:
    name, d = resolve_name(protocol)
    expected = ReplicaCount(d.replicas).resolve(f)
    if f < 1 or n != expected:
        raise ThresholdError(f"{name} needs n = {d.replicas} = {expected} at f = {f}, got n = {n}")
    return _thresholds(name, n, f)


def build(protocol: str | ProtocolDescriptor, f: int = 1, n: int | None = None) -> ProtocolSpec:
    name, d = resolve_name(protocol)
    n = ReplicaCount(d.replicas).resolve(f) if n is None else n
    t = quorum_thresholds(name, n, f)
    return ProtocolSpec(name=name, descriptor=d, n=n, f=f, phases=PHASES[name],
                        slow_suffix=SLOW_SUFFIX.get(name, ()), switch=SWITCH.get(name),
                        reply=_reply_policy(name, t), thresholds=t,
                        preorder=PREORDER.get(name, ()))


def phase_threshold(phase: Phase, n: int, f: int) -> int | None:
    return None if phase.threshold == "-" else _eval(phase.threshold, n, f)


# -- trees

@dataclass(frozen=True)
class TreeLayout:
    root: int
    fanout: int
    order: tuple                    # breadth-first placement
    parent: dict
    children: dict
    height: int
    excluded: frozenset = frozenset()

    def is_leaf(self, node: int) -> bool:
        return not self.children.get(node)

    def depth(self, node: int) -> int:
        d = 0
        while node != self.root:
            node = self.parent[node]
            d += 1
        return d

    def subtree(self, node: int) -> list:
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            out.append(x)
            stack.extend(self.children.get(x, ()))
        return out


def default_fanout(n: int) -> int:
    """Smallest fanout whose height-2 tree covers n replicas."""
    d = 2
    while 1 + d + d * d < n:
        d += 1
    return d


def tree_layout(n: int, d: int, excluded=(), root: int = 0, quorum: int | None = None) -> TreeLayout:
    if n < 1 or d < 2:
        raise ValueError("need n >= 1 and fanout >= 2")
    excluded = frozenset(excluded) - {root}
    if root in excluded:
        raise Unreconfigurable("the root cannot be excluded")
    healthy = [r for r in range(n) if r != root and r not in excluded]
    order = [root] + healthy + sorted(excluded)
    internal = -(-(n - 1) // d)     # positions that have at least one child
    if any(order.index(x) < internal for x in excluded):
        raise Unreconfigurable(f"too many excluded nodes to keep them as leaves: {sorted(excluded)}")
    if quorum is not None and n - len(excluded) < quorum:
        raise Unreconfigurable(f"{n - len(excluded)} healthy replicas cannot form {quorum}")
    parent, children = {}, {x: [] for x in order}
    for i in range(1, n):
        p = order[(i - 1) // d]
        parent[order[i]] = p
        children[p].append(order[i])
    height, i = 0, n - 1
    while i > 0:
        i = (i - 1) // d
        height += 1
    return TreeLayout(root, d, tuple(order), parent, {k: tuple(v) for k, v in children.items()},
                      height, excluded)


__all__ = ["Phase", "ProtocolError", "ProtocolSpec", "ReplyPolicy", "DescriptorOnly",
           "ThresholdError", "TreeLayout", "Unreconfigurable", "build", "default_fanout",
           "phase_threshold", "quorum_thresholds", "resolve_name", "tree_layout", "PHASES"]

"""Experiment configuration, runner, metrics and reports."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable

from .auth import AuthModel, CryptoCosts, CryptoSizes
from .clients import ClientMachine
from .design_space import ReplicaCount, loads as load_descriptor
from .engine import Context, EngineConfig, Recorder
from .protocols import ProtocolError, ProtocolSpec, build, resolve_name
from .simnet import (GEO_BANDWIDTH, FaultPlan, FaultPlanError, NetworkModel, NodeFault,
                     SimulationFault, Simulator)

SECOND = 1_000_000
MS = 1_000


class ConfigError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    def __init__(self, message: str, trace_path: str | None = None, report: dict | None = None):
        super().__init__(message)
        self.trace_path = trace_path
        self.report = report


# Inter-site round-trip times in milliseconds; clients sit in OR.
GEO_SITES = ("TY", "SU", "VA", "CA")
GEO_RTT_MS = {("TY", "SU"): 33, ("TY", "VA"): 148, ("TY", "CA"): 107,
              ("SU", "VA"): 175, ("SU", "CA"): 135, ("VA", "CA"): 62,
              ("OR", "TY"): 97, ("OR", "SU"): 126, ("OR", "VA"): 68, ("OR", "CA"): 22}
GEO_TIMERS = {"tau1": 500_000, "tau2": 2_000_000, "tau3": 500_000, "tau6": 20_000,
              "batch_timeout": 20_000, "child_timeout": 400_000, "pacemaker_min": 1_000_000,
              "stretch": 6}


@dataclass
class ExperimentConfig:
    protocol: Any = "PBFT"
    f: int = 1
    n: int | None = None
    clients: Any = 16                   # int or "saturate"
    machines: int = 4
    think: int = 0
    duration: int = 10 * SECOND
    warmup: int = 2 * SECOND
    cooldown: int = 2 * SECOND
    seed: int = 1
    repeats: int = 1
    preset: str = "local"               # "local" or "geo"
    jitter: float = 0.0
    gst: int = 0
    pre_gst_drop: float = 0.0
    pre_gst_max_delay: int = 0
    bandwidth: float | None = None
    latency: dict = field(default_factory=dict)     # "A-B": one-way us
    sites: dict = field(default_factory=dict)       # node -> site
    faults: list = field(default_factory=list)      # [{"node":, "crash_at":, ...}]
    engine: dict = field(default_factory=dict)      # EngineConfig overrides
    crypto: dict = field(default_factory=dict)      # CryptoCosts overrides
    max_clients: int = 4096
    liveness_budget: int = 3 * SECOND
    trace: str | None = None
    sweep: dict = field(default_factory=dict)       # key -> list of values

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(d["protocol"], str):
            d["protocol"] = self.protocol.name
        return d

    # -- derived

    @property
    def spec(self) -> ProtocolSpec:
        return build(self.protocol, self.f, self.n)

    def engine_config(self) -> EngineConfig:
        base = dict(GEO_TIMERS) if self.preset == "geo" else {}
        base.update(self.engine)
        return EngineConfig(**base)


def _known(cls) -> set:
    return {f.name for f in fields(cls)}


def parse_config(doc: dict | str) -> ExperimentConfig:
    """Validate a JSON-compatible document and fill defaults."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ConfigError(f"not a JSON document: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(doc) - _known(ExperimentConfig))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    doc = dict(doc)
    proto = doc.get("protocol", "PBFT")
    if isinstance(proto, dict):
        proto = load_descriptor("\n".join(f"{k} = {v}" for k, v in proto.items()))
    elif isinstance(proto, str) and "\n" in proto:
        proto = load_descriptor(proto)
    try:
        name, descriptor = resolve_name(proto)
    except ProtocolError as e:
        raise ConfigError(str(e)) from None
    doc["protocol"] = name
    cfg = ExperimentConfig(**doc)
    if not isinstance(cfg.f, int) or cfg.f < 1:
        raise ConfigError("f must be a positive integer")
    expected = ReplicaCount(descriptor.replicas).resolve(cfg.f)
    if cfg.n is None:
        cfg.n = expected
    elif cfg.n != expected:
        raise ConfigError(f"{name} needs n = {descriptor.replicas} = {expected} at f = {cfg.f}, "
                          f"got n = {cfg.n}")
    if cfg.warmup + cfg.cooldown >= cfg.duration:
        raise ConfigError("warmup + cooldown must be shorter than duration")
    if not (cfg.clients == "saturate" or (isinstance(cfg.clients, int) and cfg.clients >= 1)):
        raise ConfigError("clients must be a positive integer or 'saturate'")
    if cfg.preset not in ("local", "geo"):
        raise ConfigError("preset must be 'local' or 'geo'")
    bad = sorted(set(cfg.engine) - set(EngineConfig.keys()))
    if bad:
        raise ConfigError(f"unknown engine keys: {', '.join(bad)}")
    bad = sorted(set(cfg.crypto) - _known(CryptoCosts))
    if bad:
        raise ConfigError(f"unknown crypto keys: {', '.join(bad)}")
    for key, values in cfg.sweep.items():
        head = key.split(".")[0]
        if head not in _known(ExperimentConfig) or head in ("sweep", "protocol"):
            raise ConfigError(f"cannot sweep over {key!r}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep values for {key!r} must be a non-empty list")
    try:
        fault_plan(cfg).check(cfg.f)
    except FaultPlanError as e:
        raise ConfigError(str(e)) from None
    except TypeError as e:
        raise ConfigError(f"bad fault directive: {e}") from None
    return cfg


def fault_plan(cfg: ExperimentConfig) -> FaultPlan:
    nodes = {}
    for d in cfg.faults:
        d = dict(d)
        node = d.pop("node")
        if not 0 <= node < (cfg.n or 10**9):
            raise FaultPlanError(f"fault targets unknown replica {node}")
        nodes[node] = NodeFault(**d)
    return FaultPlan(nodes)


def network_for(cfg: ExperimentConfig, n: int, machine_ids: list) -> NetworkModel:
    if cfg.preset == "geo":
        sites = {r: GEO_SITES[r % len(GEO_SITES)] for r in range(n)}
        sites.update({m: "OR" for m in machine_ids})
        latency = {k: v * MS // 2 for k, v in GEO_RTT_MS.items()}
        bandwidth = GEO_BANDWIDTH
    else:
        sites, latency, bandwidth = {}, {}, NetworkModel().bandwidth
    sites.update({int(k): v for k, v in cfg.sites.items()})
    for key, us in cfg.latency.items():
        a, b = key.split("-")
        latency[(a, b)] = int(us)
    return NetworkModel(sites=sites, latency=latency, jitter=cfg.jitter,
                        bandwidth=cfg.bandwidth or bandwidth, gst=cfg.gst,
                        pre_gst_drop=cfg.pre_gst_drop, pre_gst_max_delay=cfg.pre_gst_max_delay)


@dataclass
class Run:
    cfg: ExperimentConfig
    spec: ProtocolSpec
    sim: Simulator
    ctx: Context
    replicas: list
    machines: list


def setup(cfg: ExperimentConfig, seed: int | None = None, clients: int | None = None,
          trace_file=None, keep_trace: bool = False, trace: bool = False) -> Run:
    spec = cfg.spec
    n, f = spec.n, spec.f
    ecfg = cfg.engine_config()
    plan = fault_plan(cfg)
    plan.check(f)
    byz = {r for r, d in plan.nodes.items() if d.byzantine}
    honest = set(range(n)) - plan.faulty()
    auth = AuthModel(byzantine=byz, costs=CryptoCosts(**cfg.crypto), sizes=CryptoSizes())
    rec = Recorder(honest)
    nclients = cfg.clients if clients is None else clients
    machines = max(1, min(cfg.machines, nclients))
    machine_ids = list(range(n, n + machines))
    ctx = Context(n=n, f=f, cfg=ecfg, auth=auth, rec=rec, clients=machine_ids, spec=spec,
                  faults=plan.nodes)
    net = network_for(cfg, n, machine_ids)
    ctx.rtt = 2 * max(net.one_way(a, b) for a in range(n) for b in range(n)) if n > 1 else 0
    sim = Simulator(net, seed=cfg.seed if seed is None else seed, faults=plan,
                    trace=trace, trace_file=trace_file, keep_trace=keep_trace)
    sim.honest = honest | set(machine_ids)
    rec.now = lambda: sim.now
    auth.hook = lambda node, us: sim.charge(us) if sim._handling is not None else None
    cls = spec.replica_class()
    replicas = [cls(r, ctx) for r in range(n)]
    sim.add_nodes(replicas)
    leader_of = getattr(replicas[0], "client_leader_of", None)
    ms = []
    for i, m in enumerate(machine_ids):
        share = nclients // machines + (1 if i < nclients % machines else 0)
        ms.append(ClientMachine(m, ctx, spec.reply, share, think=cfg.think, leader_of=leader_of))
    sim.add_nodes(ms)
    return Run(cfg, spec, sim, ctx, replicas, ms)


def _percentile(sorted_vals: list, q: float) -> float:
    if not sorted_vals:
        return 0.0
    k = max(0, min(len(sorted_vals) - 1, math.ceil(q * len(sorted_vals)) - 1))
    return sorted_vals[k]


def collect(run: Run) -> dict:
    cfg, sim, rec = run.cfg, run.sim, run.ctx.rec
    lo, hi = cfg.warmup, cfg.duration - cfg.cooldown
    window = (hi - lo) / SECOND
    lat, paths = [], {}
    for rid, (seq, state, path, t0, t1) in rec.accepted.items():
        if lo <= t1 < hi:
            lat.append((t1 - t0) / MS)
            paths[path] = paths.get(path, 0) + 1
    lat.sort()
    audit: dict = {}
    for (key, path), hops in rec.learn_hops.items():
        t = rec.commit_time.get(key)
        if t is None or not lo <= t < hi:
            continue
        bucket = audit.setdefault(path, {})
        bucket[str(hops)] = bucket.get(str(hops), 0) + 1
    per_replica = {}
    for (src, mtype), st in sorted(sim.sent_by_type.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        if src < run.spec.n:
            per_replica.setdefault(str(src), {})[str(mtype)] = [st.messages, st.bytes]
    budget_edge = cfg.duration - cfg.liveness_budget
    stuck = sum(1 for m in run.machines for rid, (t0, _) in m.outstanding.items()
                if t0 < budget_edge)
    safety = rec.summary()
    report = {
        "protocol": run.spec.name,
        "n": run.spec.n,
        "f": run.spec.f,
        "seed": sim.seed,
        "clients": sum(m.clients for m in run.machines),
        "throughput": round(len(lat) / window, 3) if window > 0 else 0.0,
        "latency_ms": {"p50": round(_percentile(lat, 0.5), 4),
                       "p90": round(_percentile(lat, 0.9), 4),
                       "p99": round(_percentile(lat, 0.99), 4),
                       "mean": round(sum(lat) / len(lat), 4) if lat else 0.0},
        "accepted": len(lat),
        "paths": dict(sorted(paths.items())),
        "phase_audit": {p: dict(sorted(v.items(), key=lambda kv: int(kv[0])))
                        for p, v in sorted(audit.items())},
        "view_changes": rec.view_changes,
        "messages": per_replica,
        "audit": {**safety,
                  "causality": sim.audit["causality"],
                  "post_gst_bound": sim.audit["post_gst_bound"],
                  "max_post_gst_delay": sim.audit["max_post_gst_delay"],
                  "dropped": sim.audit["dropped"],
                  "forged": len(run.ctx.auth.audit([])),
                  "stalled_requests": stuck,
                  "trace_digest": sim.trace_digest() if sim.tracing else None},
        "config": cfg.to_dict(),
    }
    return report


def run_once(cfg: ExperimentConfig, seed: int | None = None, clients: int | None = None,
             keep_trace: bool = False, check: bool = True, trace: bool = False) -> dict:
    trace_file = None
    if cfg.trace:
        trace_file = open(cfg.trace, "w")
    try:
        run = setup(cfg, seed, clients, trace_file=trace_file, keep_trace=keep_trace, trace=trace)
        run.sim.start()
        run.sim.run(until=cfg.duration)
    finally:
        if trace_file is not None:
            trace_file.close()
    run.ctx.rec.cross_check()
    report = collect(run)
    if keep_trace:
        report["_trace"] = run.sim.trace_lines
    if check and run.ctx.rec.violations:
        raise InvariantViolation("; ".join(run.ctx.rec.violations[:5]), cfg.trace, report)
    return report


def saturate(cfg: ExperimentConfig, seed: int | None = None, start: int = 4,
             gain: float = 0.02) -> tuple[dict, list]:
    """Double the client count until throughput grows by less than ``gain``."""
    points = []
    clients = start
    best = None
    while clients <= cfg.max_clients:
        rep = run_once(cfg, seed, clients)
        points.append({"clients": clients, "throughput": rep["throughput"],
                       "p50": rep["latency_ms"]["p50"]})
        if best is not None and rep["throughput"] < best["throughput"] * (1 + gain):
            break
        best = rep
        clients *= 2
    return best, points


def run_experiment(cfg: ExperimentConfig) -> dict:
    seeds = [cfg.seed + i for i in range(max(1, cfg.repeats))]
    per_seed = []
    for s in seeds:
        if cfg.clients == "saturate":
            rep, points = saturate(cfg, s)
            rep["saturation"] = points
        else:
            rep = run_once(cfg, s)
        per_seed.append(rep)
    if len(per_seed) == 1:
        return per_seed[0]
    merged = dict(per_seed[0])
    merged["seed"] = seeds[0]
    merged["throughput"] = round(sum(r["throughput"] for r in per_seed) / len(per_seed), 3)
    merged["latency_ms"] = {k: round(sum(r["latency_ms"][k] for r in per_seed) / len(per_seed), 4)
                            for k in per_seed[0]["latency_ms"]}
    merged["per_seed"] = [{"seed": r["seed"], "throughput": r["throughput"],
                           "latency_ms": r["latency_ms"]} for r in per_seed]
    return merged


def sweep_points(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """One config per point of the cartesian product of ``cfg.sweep``."""
    if not cfg.sweep:
        return [cfg]
    base = cfg.to_dict()
    base.pop("sweep")
    keys = list(cfg.sweep)
    points = []
    for combo in itertools.product(*(cfg.sweep[k] for k in keys)):
        doc = json.loads(json.dumps(base))
        for key, value in zip(keys, combo):
            head, _, sub = key.partition(".")
            if sub:
                doc[head] = {**doc[head], sub: value}
            else:
                doc[head] = value
            if head == "f":
                doc["n"] = None
        points.append(parse_config(doc))
    return points


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    return [run_experiment(p) for p in sweep_points(cfg)]


def single_instance(protocol: str, f: int, **overrides) -> Run:
    """Run exactly one client request through a failure-free system."""
    doc = {"protocol": protocol, "f": f, "clients": 1, "machines": 1,
           "think": 100 * SECOND, "duration": 2 * SECOND, "warmup": 0, "cooldown": SECOND}
    doc.update(overrides)
    cfg = parse_config(doc)
    run = setup(cfg, keep_trace=True)
    run.sim.start()
    run.sim.run(until=SECOND)
    return run


# -- reports

def emit_report(report: dict | list, fmt: str = "structured") -> str:
    if fmt in ("structured", "json"):
        return json.dumps(report, sort_keys=True, indent=2)
    if fmt != "human":
        raise ValueError(f"unknown format {fmt!r}")
    rows = report if isinstance(report, list) else [report]
    head = ["protocol", "n", "f", "batch", "clients", "throughput", "p50 ms", "p99 ms", "phases",
            "view changes", "violations"]
    lines = []
    for r in rows:
        phases = ",".join(f"{p}:{'/'.join(h for h in v)}" for p, v in r["phase_audit"].items())
        batch = r["config"]["engine"].get("batch_size", EngineConfig.batch_size)
        lines.append([r["protocol"], r["n"], r["f"], batch, r["clients"], f"{r['throughput']:.1f}",
                      f"{r['latency_ms']['p50']:.2f}", f"{r['latency_ms']['p99']:.2f}",
                      phases or "-", r["view_changes"], r["audit"]["violations"]])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt_row = "  ".join("{:<%d}" % w for w in widths)
    out = [fmt_row.format(*head), fmt_row.format(*("-" * w for w in widths))]
    out += [fmt_row.format(*map(str, row)) for row in lines]
    return "\n".join(out)


# -- safety matrix

SAFETY_WORKLOAD = {"clients": 1, "machines": 1, "think": 200 * MS, "jitter": 0.2,
                   "duration": 10 * SECOND, "warmup": 1 * SECOND, "cooldown": 1 * SECOND}


def safety_scenarios(protocol: str, f: int) -> dict[str, list]:
    """Fault directives for each scenario of the safety matrix."""
    n = build(protocol, f).n
    out = {
        "failure-free": [],
        "crashed-backup": [{"node": 1, "crash_at": 0}],
        "crashed-leader": [{"node": 0, "crash_at": 3 * SECOND}],
        "equivocating-leader": [{"node": 0, "equivocate_as_leader": True}],
    }
    if build(protocol, f).descriptor.topology == "tree":
        out["crashed-leaf"] = [{"node": n - 1, "crash_at": 0}]
    return out


def safety_run(protocol: str, f: int, scenario: str, seed: int) -> dict:
    faults = safety_scenarios(protocol, f)[scenario]
    cfg = parse_config({"protocol": protocol, "f": f, "seed": seed, "faults": faults,
                        **SAFETY_WORKLOAD})
    return run_once(cfg, check=False)

"""Scenario configuration, Monte Carlo trials, metrics and cost accounting."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import baseline, graph, robust
from .channel import ChannelParams, MeasurementSet, NoiseModel, sample_network

ALGORITHMS = ("rdml", "dml", "cmle", "noncoop")
MESSAGE_DIMS = {"rdml": (2, 2), "dml": (baseline.INIT_DIM, baseline.UPDATE_DIM), "cmle": (0, 0), "noncoop": (0, 0)}


@dataclass(frozen=True)
class Scenario:
    """Everything needed to regenerate a batch of trials.

    ``nlos_fraction`` is a number in [0, 1] or ``"random"`` (uniform per
    trial); ``radius=None`` means a complete observation graph. Channel
    spreads ``sigma_los`` / ``sigma_nlos`` are standard deviations in dB.
    """

    area: tuple = (100.0, 100.0)
    anchors: object = "default"
    num_agents: int = 10
    K: int = 40
    trials: int = 100
    p0_los: tuple = (-30.0, 0.0)
    alpha_los: tuple = (2.0, 4.0)
    sigma_los: float = 6.0
    p0_nlos_mean: float = 0.0
    p0_nlos_sd: float = 5.0
    alpha_nlos: tuple = (3.0, 6.0)
    sigma_nlos: float = 12.0
    nlos_fraction: object = "random"
    noise: str = "gaussian"
    nu: float = 5.0
    radius: float | None = None
    drop_prob: float = 0.0
    algorithms: tuple = ("rdml", "dml", "cmle")
    seed: int = 0
    max_rejections: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "area", tuple(float(v) for v in self.area))
        for name in ("p0_los", "alpha_los", "alpha_nlos", "algorithms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.anchors != "default":
            object.__setattr__(self, "anchors", tuple(tuple(float(c) for c in a) for a in self.anchors))
        if self.trials < 1 or self.K < 1 or self.num_agents < 0:
            raise ValueError("trials and K must be at least 1")
        for lo, hi in (self.p0_los, self.alpha_los, self.alpha_nlos):
            if not lo < hi:
                raise ValueError("generation ranges must be non-degenerate")
        if min(self.alpha_los[0], self.alpha_nlos[0]) <= 0:
            raise ValueError("path-loss exponent ranges must be positive")
        if not self.sigma_nlos > self.sigma_los > 0:
            raise ValueError("need sigma_nlos > sigma_los > 0")
        if self.p0_nlos_sd < 0:
            raise ValueError("p0_nlos_sd must be non-negative")
        if self.nlos_fraction != "random" and not 0.0 <= float(self.nlos_fraction) <= 1.0:
            raise ValueError("nlos_fraction must be 'random' or lie in [0, 1]")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")
        self.noise_model()

    @property
    def anchor_positions(self) -> np.ndarray:
        return np.array(graph.DEFAULT_ANCHORS if self.anchors == "default" else self.anchors, float).reshape(-1, 2)

    @property
    def box(self) -> tuple:
        return (0.0, self.area[0], 0.0, self.area[1])

    def noise_model(self) -> NoiseModel:
        return NoiseModel(los="gaussian", nlos=self.noise, nu=self.nu)

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(a) if isinstance(a, tuple) else a for a in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d or {})
        noise = d.get("noise")
        if isinstance(noise, dict):  # {kind: student_t, nu: 5}
            d["noise"] = noise.get("kind", "gaussian")
            if "nu" in noise:
                d["nu"] = noise["nu"]
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def draw_channel(scn: Scenario, rng: np.random.Generator) -> ChannelParams:
    return ChannelParams(
        rng.uniform(*scn.p0_los), rng.uniform(*scn.alpha_los), scn.sigma_los**2,
        rng.normal(scn.p0_nlos_mean, scn.p0_nlos_sd), rng.uniform(*scn.alpha_nlos), scn.sigma_nlos**2,
    )


@dataclass
class TrialInstance:
    """One generated network with its ground truth and measurements."""

    index: int
    seed: tuple
    net: graph.DirectedNetwork
    agent_positions: np.ndarray
    channel: ChannelParams
    nlos_fraction: float
    meas: MeasurementSet
    rejections: int = 0


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for trial ``index``, unaffected by the trial count."""
    return np.random.default_rng([int(master_seed), int(index)])


def generate_trial(scn: Scenario, index: int) -> TrialInstance:
    rng = trial_rng(scn.seed, index)
    eta = draw_channel(scn, rng)
    # always consumed so that fixed-fraction scenarios stay paired with random ones
    u = rng.uniform()
    frac = u if scn.nlos_fraction == "random" else float(scn.nlos_fraction)
    anchors = scn.anchor_positions
    w, h = scn.area
    rejections = 0
    while True:
        agents = rng.uniform((0.0, 0.0), (w, h), size=(scn.num_agents, 2))
        if scn.radius is None:
            net = graph.complete_network(scn.num_agents, anchors)
        else:
            net = graph.generate_geometric_network(anchors, agents, scn.radius, rng=rng, drop_prob=scn.drop_prob)
        report = graph.compatibility_test(net)
        if report.compatible and (report.initializable or scn.num_agents == 0):
            break
        rejections += 1
        if scn.radius is None or rejections >= scn.max_rejections:
            raise RuntimeError(
                f"trial {index}: no compatible network after {rejections} placements "
                f"(initializable={report.initializable}, anchors={len(anchors)}, radius={scn.radius})")
    net = net.with_los(graph.generate_los_matrix(net, frac, rng))
    pos = np.vstack([agents, anchors])
    meas = sample_network(net, pos, eta, scn.K, scn.noise_model(), rng)
    return TrialInstance(index, (int(scn.seed), int(index)), net, agents, eta, frac, meas, rejections)


@dataclass
class TrialResult:
    """Per-trial outcome. ``runtime`` is excluded from equality."""

    trial: int
    seed: tuple
    errors: dict
    messages: dict
    channel: ChannelParams
    nlos_fraction: float
    rejections: int
    digest: str
    estimates: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict, compare=False)

    def __eq__(self, other):
        if not isinstance(other, TrialResult):
            return NotImplemented
        same = lambda a, b: a.keys() == b.keys() and all(  # noqa: E731
            np.array_equal(a[k], b[k], equal_nan=True) for k in a)
        return (self.trial == other.trial and self.seed == other.seed and self.digest == other.digest
                and self.channel == other.channel and self.nlos_fraction == other.nlos_fraction
                and self.rejections == other.rejections and self.messages == other.messages
                and same(self.errors, other.errors) and same(self.estimates, other.estimates))

    def manifest(self) -> dict:
        return {"trial": self.trial, "seed": list(self.seed), "digest": self.digest,
                "channel": self.channel.as_dict(), "nlos_fraction": self.nlos_fraction,
                "rejections": self.rejections}


def noncooperative_baseline(net: graph.DirectedNetwork, meas: MeasurementSet,
                            config: robust.RobustConfig = robust.DEFAULT_CONFIG) -> list:
    """Anchor-only self-localization; agents with fewer than three anchors stay unlocalized."""
    a_deg = graph.anchor_degree(net)
    out = []
    for i in range(net.num_agents):
        if a_deg[i] < graph.MIN_REFERENCES:
            out.append(robust.NodeEstimate(i, None))
            continue
        info = robust.gather_information(net, meas, i, (), {})
        out.append(robust.self_localize(info, meas.K, config, node=i))
    return out


def _errors(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(estimates, float) - truth, axis=1)


def run_instance(inst: TrialInstance, algorithms, box=(0.0, 100.0, 0.0, 100.0),
                 config: robust.RobustConfig | None = None) -> TrialResult:
    """Run each algorithm on the same measurements of ``inst``."""
    cfg = config or dataclasses.replace(robust.DEFAULT_CONFIG, search_box=box)
    search = baseline.SearchConfig(box=box)
    errors, messages, runtime, estimates = {}, {}, {}, {}
    digest = inst.meas.digest()
    rdml_pos = None
    for algo in algorithms:
        if inst.meas.digest() != digest:
            raise RuntimeError("measurements changed between algorithms")
        t0 = time.perf_counter()
        if algo == "rdml":
            res = robust.run_rdml(inst.net, inst.meas, cfg)
            pos, msgs = res.positions(), res.messages
            rdml_pos = pos
        elif algo == "dml":
            res = baseline.run_dml(inst.net, inst.meas, search)
            pos, msgs = res.positions(), res.messages
        elif algo == "cmle":
            seeds = [] if rdml_pos is None else [rdml_pos]
            pos = baseline.cmle_solve(inst.net, inst.meas, inst.net.los, inst.channel, seeds=seeds, box=box)
            msgs = 0
        elif algo == "noncoop":
            est = noncooperative_baseline(inst.net, inst.meas, cfg)
            pos = np.array([e.position if e.localized else (np.nan, np.nan) for e in est]).reshape(-1, 2)
            msgs = 0
        else:
            raise ValueError(f"unknown algorithm {algo!r}")
        runtime[algo] = time.perf_counter() - t0
        estimates[algo] = np.asarray(pos, float).reshape(-1, 2)
        errors[algo] = _errors(estimates[algo], inst.agent_positions)
        messages[algo] = int(msgs)
    return TrialResult(inst.index, inst.seed, errors, messages, inst.channel, inst.nlos_fraction,
                       inst.rejections, digest, estimates, runtime)


def run_trial(scn: Scenario, index: int) -> TrialResult:
    return run_instance(generate_trial(scn, index), scn.algorithms, scn.box)


def _run_trial_args(args):
    return run_trial(*args)


def run_trials(scn: Scenario, trials: int | None = None, parallel: int = 1, start: int = 0) -> list:
    """Run trials ``start .. start + trials - 1``; results sorted by trial index."""
    n = scn.trials if trials is None else int(trials)
    jobs = [(scn, start + k) for k in range(n)]
    if parallel > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_trial_args, jobs))
    else:
        results = [run_trial(*job) for job in jobs]
    return sorted(results, key=lambda r: r.trial)


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True, eq=False)
class Ecdf:
    values: np.ndarray
    probs: np.ndarray

    def __call__(self, x) -> float:
        return float(np.searchsorted(self.values, x, side="right")) / len(self.values)

    def quantile(self, p: float) -> float:
        """Smallest value ``v`` with ``F(v) >= p``."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        k = max(int(math.ceil(p * len(self.values) - 1e-12)) - 1, 0)
        return float(self.values[k])

    def knots(self, n: int = 101) -> list:
        return [(float(p), self.quantile(p)) for p in np.linspace(0.0, 1.0, n)]

    def __len__(self) -> int:
        return len(self.values)


def _finite(errors) -> np.ndarray:
    e = np.asarray(errors, float).ravel()
    return e[np.isfinite(e)]


def ecdf(errors) -> Ecdf:
    v = np.sort(_finite(errors))
    if v.size == 0:
        raise ValueError("ecdf needs at least one error value")
    return Ecdf(v, np.arange(1, v.size + 1) / v.size)


def median_error(errors) -> float:
    e = _finite(errors)
    if e.size == 0:
        raise ValueError("median of an empty error set")
    return float(np.median(e))


def stacked_errors(results, algo: str) -> np.ndarray:
    """Concatenate per-agent errors of every trial; unlocalized agents are dropped."""
    return _finite(np.concatenate([r.errors[algo] for r in results])) if results else np.zeros(0)


def count_messages(log, algorithm: str, net: graph.DirectedNetwork) -> int:
    """Scalar deliveries: message dimension times the number of agent receivers."""
    first, later = MESSAGE_DIMS[algorithm]
    total = 0
    for entry in log:
        if entry.broadcast:
            dim = first if entry.round == 0 else later
            total += dim * len(net.agent_receivers(entry.node))
    return total


def summarize(results, algorithms=None) -> dict:
    algorithms = algorithms or (list(results[0].errors) if results else [])
    out = {}
    for algo in algorithms:
        e = stacked_errors(results, algo)
        row = {"n": int(e.size), "median_error_m": median_error(e) if e.size else None,
               "messages_mean": float(np.mean([r.messages[algo] for r in results])),
               "ecdf": [{"p": p, "error_m": v} for p, v in ecdf(e).knots()] if e.size else []}
        out[algo] = row
    return out


def write_outputs(results, out_dir, scn: Scenario) -> dict:
    """Per-trial CSV, summary JSON and replay manifest under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "agent", "algo", "error_m", "messages"])
        for r in results:
            for algo, errs in r.errors.items():
                for i, e in enumerate(errs):
                    w.writerow([r.trial, i, algo, "" if not np.isfinite(e) else repr(float(e)), r.messages[algo]])
    summary = summarize(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    manifest = {"scenario": scn.as_dict(), "master_seed": scn.seed, "trials": [r.manifest() for r in results]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return summary


def parse_sweep(spec: str) -> tuple:
    """``'K=1,10,40'`` or ``'nlos_fraction=0:0.1:1'`` -> (name, values)."""
    name, _, rhs = spec.partition("=")
    name = name.strip()
    if not name or not rhs:
        raise ValueError(f"bad sweep spec {spec!r}")
    if ":" in rhs:
        a, step, b = (float(v) for v in rhs.split(":"))
        if step <= 0:
            raise ValueError("sweep step must be positive")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        values = [round(a + k * step, 12) for k in range(n)]
    else:
        values = [yaml.safe_load(v) for v in rhs.split(",")]
    return name, values


def sweep(scn: Scenario, name: str, values, trials: int | None = None, parallel: int = 1) -> list:
    """One summary row per (value, algorithm); trials are paired across values."""
    rows = []
    for v in values:
        point = scn.with_(**{name: v})
        res = run_trials(point, trials, parallel)
        for algo in point.algorithms:
            e = stacked_errors(res, algo)
            rows.append({"param": name, "value": v, "algo": algo, "n": int(e.size),
                         "median_error_m": median_error(e) if e.size else None})
    return rows


# --------------------------------------------------------------------------
# network description files

def load_network(path_or_dict) -> graph.DirectedNetwork:
    """Build a network from a YAML/JSON description.

    Keys: ``anchors`` (list of points or ``"default"``), ``agents`` (points)
    or ``num_agents``; one of ``radius``, ``edges`` (directed ``[j, i]``
    pairs), ``observation`` (0/1 matrix) or ``complete: true``; optional
    ``drop_edges``, ``los`` (matrix) and ``nlos_pairs``.
    """
    if isinstance(path_or_dict, dict):
        d = path_or_dict
    else:
        with open(path_or_dict) as fh:
            d = yaml.safe_load(fh)
    anchors = d.get("anchors", "default")
    anchors = np.array(graph.DEFAULT_ANCHORS if anchors == "default" else anchors, float).reshape(-1, 2)
    agents = d.get("agents")
    nu = int(d["num_agents"]) if agents is None else len(agents)
    n = nu + len(anchors)
    if "observation" in d:
        obs = np.array(d["observation"], bool)
    elif "edges" in d:
        obs = np.zeros((n, n), bool)
        for j, i in d["edges"]:
            obs[int(j), int(i)] = True
    elif "radius" in d:
        if agents is None:
            raise ValueError("radius-based networks need agent positions")
        obs = graph.generate_geometric_network(anchors, agents, float(d["radius"])).observation.copy()
    elif d.get("complete", False):
        obs = ~np.eye(n, dtype=bool)
    else:
        raise ValueError("network file needs one of observation, edges, radius or complete")
    for j, i in d.get("drop_edges", ()):
        obs[int(j), int(i)] = False
    los = np.array(d["los"], bool) if "los" in d else np.ones((n, n), bool)
    for j, i in d.get("nlos_pairs", ()):
        los[int(j), int(i)] = los[int(i), int(j)] = False
    return graph.DirectedNetwork(nu, anchors, obs, los)

"""Robust Gaussian-mixture ML localization and the RD-ML distributed scheme.

Every agent models each time-averaged RSS it receives as a two-component
(LoS / NLoS) Gaussian mixture and maximizes its local log-likelihood jointly
over its position, its two mixing coefficients (anchor links and agent links)
and the six channel parameters. Neighbor agents enter through their broadcast
position estimates, treated as known.

The maximization combines a batched ECM ascent over many starting points
(closed-form updates for the mixing coefficients and channel parameters, a
damped Gauss-Newton step for the position) with a quasi-Newton polish of the
best candidates on the exact objective.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph
from .channel import D_MIN, ChannelParams, MeasurementSet, mixture_log_terms
from .optim import BoxSpec, OptimizerConfig, minimize

_C = 10.0 / math.log(10.0)
_LOG_2PI = math.log(2.0 * math.pi)


class Status(enum.Enum):
    UNLOCALIZED = "unlocalized"
    SELF_LOCALIZED = "self_localized"
    UPDATED = "updated"


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class RobustConfig:
    search_box: tuple = (0.0, 100.0, 0.0, 100.0)
    grid: int = 5
    init_eta: tuple = (-15.0, 3.0, 50.0, 0.0, 4.5, 150.0)
    init_mix: float = 0.5
    eps: float = 1e-4
    p0_bounds: tuple = (-200.0, 100.0)
    alpha_bounds: tuple = (0.1, 10.0)
    var_bounds: tuple = (20.0, 1e4)
    var_gap: float = 1e-6
    mix_inits: tuple = (0.5,)
    eta_inits: tuple = ()
    ecm_iters: int = 30
    ecm_tol: float = 1e-10
    survivors: int = 10
    refine_iters: int = 150
    polish: int = 3
    optimizer: OptimizerConfig = OptimizerConfig(max_iter=500, ftol=1e-12, xtol=1e-7)


DEFAULT_CONFIG = RobustConfig()


@dataclass(frozen=True, eq=False)
class LocalInformation:
    """Time-averaged RSS available to one agent, with the sender positions.

    Anchor links carry true anchor positions; agent links carry the
    neighbors' broadcast estimates.
    """

    anchor_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    anchor_rbar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    agent_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    agent_rbar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    anchor_ids: tuple = ()
    agent_ids: tuple = ()

    def __post_init__(self):
        for name in ("anchor_positions", "agent_positions"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(-1, 2))
        for name in ("anchor_rbar", "agent_rbar"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(-1))
        if len(self.anchor_positions) != len(self.anchor_rbar) or len(self.agent_positions) != len(self.agent_rbar):
            raise ValueError("positions and measurements must pair up")
        if not (np.all(np.isfinite(self.anchor_rbar)) and np.all(np.isfinite(self.agent_rbar))):
            raise ValueError("measurements must be finite")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_rbar)

    @property
    def num_agents(self) -> int:
        return len(self.agent_rbar)

    def __len__(self) -> int:
        return self.num_anchors + self.num_agents

    def stacked(self):
        pos = np.vstack([self.anchor_positions, self.agent_positions])
        r = np.concatenate([self.anchor_rbar, self.agent_rbar])
        is_anchor = np.r_[np.ones(self.num_anchors, bool), np.zeros(self.num_agents, bool)]
        return pos, r, is_anchor

    def anchors_only(self) -> "LocalInformation":
        return LocalInformation(self.anchor_positions, self.anchor_rbar, anchor_ids=self.anchor_ids)


@dataclass(frozen=True, eq=False)
class NodeEstimate:
    node: int
    position: np.ndarray | None
    lam: float = 0.5
    zeta: float = 0.5
    eta: ChannelParams | None = None
    status: Status = Status.UNLOCALIZED
    round: int | None = None
    objective: float = float("nan")
    lam_identified: bool = True
    zeta_identified: bool = True

    @property
    def localized(self) -> bool:
        return self.status is not Status.UNLOCALIZED

    def as_dict(self) -> dict:
        return {
            "node": self.node,
            "status": self.status.value,
            "round": self.round,
            "position": None if self.position is None else [float(v) for v in self.position],
            "lambda": self.lam,
            "zeta": self.zeta,
            "zeta_identified": self.zeta_identified,
            "eta": None if self.eta is None else self.eta.as_dict(),
            "objective": self.objective,
        }


# --------------------------------------------------------------------------
# objective

def local_log_likelihood(x, lam: float, zeta: float, eta: ChannelParams, info: LocalInformation, K: int) -> float:
    """Sum of mixture log-densities over anchor links (weight ``lam``) and
    agent links (weight ``zeta``), sharing ``eta`` and ``K``."""
    if len(info) == 0:
        raise ValueError("no measurements available")
    pos, r, is_anchor = info.stacked()
    s = _C * np.log(np.maximum(np.linalg.norm(pos - np.asarray(x, float), axis=1), D_MIN))
    w = np.where(is_anchor, lam, zeta)
    return float(np.sum(mixture_log_terms(r, s, w, eta.as_array(), K)))


class _Problem:
    """Negative log-likelihood of one agent in the optimizer's parameterisation.

    Parameter vector: ``x, y, lam, zeta, p0_los, alpha_los, var_los, p0_nlos,
    alpha_nlos, ratio`` with ``var_nlos = ratio * var_los``. Unidentifiable
    mixing coefficients are held fixed and dropped from the free vector.
    """

    def __init__(self, info: LocalInformation, K: int, cfg: RobustConfig, lam0=0.5, zeta0=0.5):
        self.pos, self.r, self.is_anchor = info.stacked()
        self.K = K
        self.cfg = cfg
        self.has_a = info.num_anchors > 0
        self.has_u = info.num_agents > 0
        self.fixed = {2: lam0, 3: zeta0}
        self.free = [k for k in range(10) if not (k == 2 and not self.has_a) and not (k == 3 and not self.has_u)]
        x0, x1, y0, y1 = cfg.search_box
        e = cfg.eps
        vlo, vhi = cfg.var_bounds
        lo = [x0, y0, e, e, cfg.p0_bounds[0], cfg.alpha_bounds[0], vlo, cfg.p0_bounds[0], cfg.alpha_bounds[0], 1 + cfg.var_gap]
        hi = [x1, y1, 1 - e, 1 - e, cfg.p0_bounds[1], cfg.alpha_bounds[1], vhi, cfg.p0_bounds[1], cfg.alpha_bounds[1], vhi / vlo]
        self.box = BoxSpec(tuple(lo[k] for k in self.free), tuple(hi[k] for k in self.free),
                           ("logit",) * len(self.free))

    def full(self, z) -> np.ndarray:
        theta = np.empty(10)
        theta[self.free] = z
        for k, v in self.fixed.items():
            if k not in self.free:
                theta[k] = v
        return theta

    def reduce(self, theta) -> np.ndarray:
        return np.asarray(theta, float)[self.free]

    def value_and_grad(self, z):
        th = self.full(z)
        K, r = self.K, self.r
        diff = th[:2] - self.pos
        d2 = np.einsum("ij,ij->i", diff, diff)
        d = np.sqrt(d2)
        clamp = d < D_MIN
        s = _C * np.log(np.where(clamp, D_MIN, d))
        lam, zeta, p0l, al, vl, p0n, an, ratio = th[2:]
        vn = vl * ratio
        w = np.where(self.is_anchor, lam, zeta)
        el = r - p0l + al * s
        en = r - p0n + an * s
        la = np.log(w) - 0.5 * (_LOG_2PI + math.log(vl / K)) - 0.5 * K * el * el / vl
        lb = np.log1p(-w) - 0.5 * (_LOG_2PI + math.log(vn / K)) - 0.5 * K * en * en / vn
        m = np.logaddexp(la, lb)
        g = np.exp(la - m)
        h = 1.0 - g
        grad = np.zeros(10)
        gw = g / w - h / (1.0 - w)
        grad[2] = gw[self.is_anchor].sum()
        grad[3] = gw[~self.is_anchor].sum()
        gl, hn = g * K * el / vl, h * K * en / vn
        grad[4] = gl.sum()
        grad[5] = -(gl * s).sum()
        dvl = np.sum(g * (-0.5 / vl + 0.5 * K * el * el / vl**2))
        dvn = np.sum(h * (-0.5 / vn + 0.5 * K * en * en / vn**2))
        grad[6] = dvl + dvn * ratio
        grad[7] = hn.sum()
        grad[8] = -(hn * s).sum()
        grad[9] = dvn * vl
        ds = -(gl * al + hn * an)
        coef = np.where(clamp, 0.0, ds * _C / np.where(clamp, 1.0, d2))
        grad[:2] = coef @ diff
        return -float(m.sum()), -grad[self.free]

    def nll(self, z) -> float:
        return self.value_and_grad(z)[0]

    def grad(self, z):
        return self.value_and_grad(z)[1]


# --------------------------------------------------------------------------
# batched ECM ascent

def _ecm(prob: _Problem, x, lam, zeta, eta, iters: int, tol: float):
    """Run ECM from ``S`` starting points at once.

    Shapes: ``x (S, 2)``, ``lam, zeta (S,)``, ``eta (S, 6)``. Returns the
    updated arrays and the log-likelihood of each start.
    """
    cfg, K = prob.cfg, prob.K
    pos, r, is_a = prob.pos, prob.r, prob.is_anchor
    x0, x1, y0, y1 = cfg.search_box
    lo_xy, hi_xy = np.array([x0, y0]), np.array([x1, y1])
    vlo, vhi = cfg.var_bounds
    gap = 1.0 + cfg.var_gap
    x, lam, zeta, eta = x.copy(), lam.copy(), zeta.copy(), eta.copy()

    def estep(x, lam, zeta, eta):
        diff = x[:, None, :] - pos[None]
        d = np.sqrt(np.einsum("slk,slk->sl", diff, diff))
        s = _C * np.log(np.maximum(d, D_MIN))
        w = np.where(is_a[None], lam[:, None], zeta[:, None])
        el = r - eta[:, 0:1] + eta[:, 1:2] * s
        en = r - eta[:, 3:4] + eta[:, 4:5] * s
        vl, vn = eta[:, 2:3], eta[:, 5:6]
        with np.errstate(divide="ignore"):
            la = np.log(w) - 0.5 * np.log(2 * np.pi * vl / K) - 0.5 * K * el**2 / vl
            lb = np.log1p(-w) - 0.5 * np.log(2 * np.pi * vn / K) - 0.5 * K * en**2 / vn
        m = np.logaddexp(la, lb)
        return m.sum(axis=1), np.exp(la - m), s, diff, d

    ll, g, s, diff, d = estep(x, lam, zeta, eta)
    for _ in range(iters):
        h = 1.0 - g
        if prob.has_a:
            lam = np.clip(g[:, is_a].mean(axis=1), cfg.eps, 1 - cfg.eps)
        if prob.has_u:
            zeta = np.clip(g[:, ~is_a].mean(axis=1), cfg.eps, 1 - cfg.eps)
        new = eta.copy()
        wsum = []
        for wt, o in ((g, 0), (h, 3)):
            W = wt.sum(axis=1)
            live = W > 1e-9
            Ws = np.where(live, W, 1.0)
            ms = (wt * s).sum(axis=1) / Ws
            mr = (wt @ r) / Ws
            sc = s - ms[:, None]
            sss = (wt * sc * sc).sum(axis=1)
            ssr = (wt * sc * (r - mr[:, None])).sum(axis=1)
            ok = live & (sss > 1e-12 * np.maximum(W, 1.0))
            a = np.where(ok, -ssr / np.where(ok, sss, 1.0), eta[:, o + 1])
            a = np.clip(a, *cfg.alpha_bounds)
            p0 = np.clip(mr + a * ms, *cfg.p0_bounds)
            e = r - p0[:, None] + a[:, None] * s
            var = K * (wt * e * e).sum(axis=1) / Ws
            new[:, o] = np.where(live, p0, eta[:, o])
            new[:, o + 1] = np.where(live, a, eta[:, o + 1])
            new[:, o + 2] = np.where(live, var, eta[:, o + 2])
            wsum.append(np.where(live, W, 0.0))
        vl, vn = new[:, 2], new[:, 5]
        # constrained variance update: var_nlos >= gap * var_los
        pooled = (wsum[0] * vl + wsum[1] * vn / gap) / np.maximum(wsum[0] + wsum[1], 1e-300)
        bad = vn < gap * vl
        vl = np.clip(np.where(bad, pooled, vl), vlo, vhi)
        vn = np.clip(np.where(bad, gap * pooled, vn), gap * vl, gap * vhi)
        new[:, 2], new[:, 5] = vl, vn
        eta = new

        # damped Gauss-Newton on the expected complete-data objective in x
        wl = g * K / eta[:, 2:3]
        wn = h * K / eta[:, 5:6]
        el = r - eta[:, 0:1] + eta[:, 1:2] * s
        en = r - eta[:, 3:4] + eta[:, 4:5] * s
        dsdx = _C * diff / np.maximum(d, D_MIN)[..., None] ** 2
        jl = eta[:, 1:2, None] * dsdx
        jn = eta[:, 4:5, None] * dsdx
        A = np.einsum("sl,sli,slj->sij", wl, jl, jl) + np.einsum("sl,sli,slj->sij", wn, jn, jn)
        A += 1e-9 * np.eye(2)
        b = np.einsum("sl,sli->si", wl * el, jl) + np.einsum("sl,sli->si", wn * en, jn)
        step = -np.linalg.solve(A, b[..., None])[..., 0]
        q0 = (wl * el**2 + wn * en**2).sum(axis=1)
        t = np.ones(len(x))
        accepted = np.zeros(len(x), bool)
        xn = x.copy()
        for _ in range(6):
            xc = np.clip(x + t[:, None] * step, lo_xy, hi_xy)
            dc = np.linalg.norm(xc[:, None, :] - pos[None], axis=-1)
            sc = _C * np.log(np.maximum(dc, D_MIN))
            e1 = r - eta[:, 0:1] + eta[:, 1:2] * sc
            e2 = r - eta[:, 3:4] + eta[:, 4:5] * sc
            q1 = (wl * e1**2 + wn * e2**2).sum(axis=1)
            take = (q1 <= q0) & ~accepted
            xn[take] = xc[take]
            accepted |= take
            if accepted.all():
                break
            t *= 0.5
        x = xn

        ll_new, g, s, diff, d = estep(x, lam, zeta, eta)
        delta = np.max(np.abs(ll_new - ll))
        ll = ll_new
        if delta < tol * max(1.0, float(np.max(np.abs(ll)))):
            break
    return x, lam, zeta, eta, ll


def _seed_positions(cfg: RobustConfig, info: LocalInformation) -> np.ndarray:
    x0, x1, y0, y1 = cfg.search_box
    pts = []
    if info.num_anchors:
        pts.append(info.anchor_positions.mean(axis=0))
    else:
        pts.append(info.agent_positions.mean(axis=0))
    gx = x0 + (x1 - x0) * (np.arange(cfg.grid) + 0.5) / cfg.grid
    gy = y0 + (y1 - y0) * (np.arange(cfg.grid) + 0.5) / cfg.grid
    pts.extend((a, b) for a in gx for b in gy)
    return np.clip(np.array(pts, float), [x0, y0], [x1, y1])


def _fit(info: LocalInformation, K: int, cfg: RobustConfig, warm: NodeEstimate | None = None):
    prob = _Problem(info, K, cfg, cfg.init_mix, cfg.init_mix)
    base = _seed_positions(cfg, info)
    etas = np.array((cfg.init_eta,) + tuple(cfg.eta_inits), float)
    combos = [(m, e) for e in etas for m in cfg.mix_inits]
    xs = np.tile(base, (len(combos), 1))
    lam = np.repeat([m for m, _ in combos], len(base)).astype(float)
    eta = np.repeat(np.array([e for _, e in combos]), len(base), axis=0)
    zeta = lam.copy() if prob.has_u else np.full(len(xs), cfg.init_mix)
    if not prob.has_a:
        lam = np.full(len(xs), cfg.init_mix)
    if warm is not None and warm.position is not None:
        xs = np.vstack([xs, warm.position])
        lam = np.r_[lam, warm.lam]
        zeta = np.r_[zeta, warm.zeta]
        eta = np.vstack([eta, warm.eta.as_array()])
    x, lam, zeta, eta, ll = _ecm(prob, xs, lam, zeta, eta, cfg.ecm_iters, cfg.ecm_tol)
    if cfg.survivors and cfg.refine_iters:
        keep = np.sort(np.argsort(-ll, kind="stable")[: cfg.survivors])
        x, lam, zeta, eta, ll = _ecm(prob, x[keep], lam[keep], zeta[keep], eta[keep], cfg.refine_iters, cfg.ecm_tol)

    top = np.argsort(-ll, kind="stable")[: cfg.polish]
    seeds = []
    for k in top:
        theta = np.r_[x[k], lam[k], zeta[k], eta[k, :5], eta[k, 5] / eta[k, 2]]
        seeds.append(np.clip(prob.reduce(theta), prob.box.lower, prob.box.upper))
    res = minimize(prob.nll, prob.box, seeds, replace(cfg.optimizer, multistart=len(seeds)), grad=prob.grad)
    theta = prob.full(res.x)
    lam_, zeta_ = float(theta[2]), float(theta[3])
    eta_ = ChannelParams(theta[4], theta[5], theta[6], theta[7], theta[8], theta[6] * theta[9])
    return theta[:2].copy(), lam_, zeta_, eta_, -res.fun, prob


def self_localize(info: LocalInformation, K: int, config: RobustConfig = DEFAULT_CONFIG, node: int = -1) -> NodeEstimate:
    """Anchor-only robust ML fit of position, anchor mixing weight and channel."""
    if info.num_anchors < graph.MIN_REFERENCES:
        raise PreconditionError("self-localization in 2D needs at least three anchors")
    x, lam, zeta, eta, obj, _ = _fit(info.anchors_only(), K, config)
    return NodeEstimate(node, x, lam, config.init_mix, eta, Status.SELF_LOCALIZED, 0, obj,
                        lam_identified=True, zeta_identified=False)


def rdml_update(info: LocalInformation, K: int, config: RobustConfig = DEFAULT_CONFIG, node: int = -1,
                previous: NodeEstimate | None = None, round_index: int = 1) -> NodeEstimate:
    """Joint fit over position, both mixing weights and channel parameters,
    using neighbor estimates in ``info`` as known positions."""
    if len(info) < graph.MIN_REFERENCES:
        raise PreconditionError("need at least three references (anchors plus localized agents)")
    warm = previous if previous is not None and previous.localized else None
    x, lam, zeta, eta, obj, prob = _fit(info, K, config, warm)
    status = Status.UPDATED if round_index > 0 else Status.SELF_LOCALIZED
    return NodeEstimate(node, x, lam, zeta, eta, status, round_index, obj,
                        lam_identified=prob.has_a, zeta_identified=prob.has_u)


# --------------------------------------------------------------------------
# network-level scheme

@dataclass
class RoundLogEntry:
    round: int
    node: int
    objective: float
    broadcast_count: int
    broadcast: bool = False


@dataclass
class SchemeResult:
    """Outcome of a distributed run: final estimates plus the round log."""

    estimates: list
    log: list
    rounds: int
    history: dict = field(default_factory=dict)

    @property
    def messages(self) -> int:
        return int(sum(e.broadcast_count for e in self.log))

    def positions(self) -> np.ndarray:
        return np.array([e.position if e.localized else (np.nan, np.nan) for e in self.estimates])


class IncompatibleNetworkError(ValueError):
    pass


def require_compatible(net: graph.DirectedNetwork) -> graph.CompatibilityReport:
    report = graph.compatibility_test(net)
    if not report.compatible:
        white = [i for i, k in enumerate(report.coloring_order) if k is None]
        raise IncompatibleNetworkError(f"network is not compatible; agents never localized: {white}")
    return report


def gather_information(net: graph.DirectedNetwork, meas: MeasurementSet, i: int,
                       agent_ids, broadcast_positions) -> LocalInformation:
    """Collect node ``i``'s anchor links and the links from ``agent_ids``."""
    _, gamma_a, _ = graph.neighborhoods(net, i)
    a_ids = tuple(sorted(gamma_a))
    a_pos = net.anchor_positions[[a - net.num_agents for a in a_ids]] if a_ids else np.zeros((0, 2))
    u_ids = tuple(sorted(agent_ids))
    u_pos = np.array([broadcast_positions[j] for j in u_ids]).reshape(-1, 2)
    return LocalInformation(a_pos, meas.rbar[list(a_ids), i], u_pos, meas.rbar[list(u_ids), i],
                            anchor_ids=a_ids, agent_ids=u_ids)


def run_rdml(net: graph.DirectedNetwork, meas: MeasurementSet, config: RobustConfig = DEFAULT_CONFIG) -> SchemeResult:
    """Synchronous-round simulation of the RD-ML scheme on ``net``.

    Each agent broadcasts its 2D position once, when first localized; the
    broadcast reaches every agent with an in-edge from it.
    """
    report = require_compatible(net)
    schedule = graph.update_schedule(net)
    if len(schedule) > report.lifetime + 2:
        raise RuntimeError("round count exceeded the coloring lifetime")
    K = meas.K
    estimates = [NodeEstimate(i, None) for i in range(net.num_agents)]
    broadcast: dict = {}
    log: list = []
    history: dict = {}
    for rnd in schedule:
        new_est = {}
        for i in rnd.solvers:
            info = gather_information(net, meas, i, rnd.hat_gamma_u[i], broadcast)
            if rnd.index == 0:
                new_est[i] = self_localize(info, K, config, node=i)
            else:
                new_est[i] = rdml_update(info, K, config, node=i, previous=estimates[i], round_index=rnd.index)
        for i, est in new_est.items():
            estimates[i] = est
            sent = 2 * len(net.agent_receivers(i)) if i in rnd.broadcasters else 0
            log.append(RoundLogEntry(rnd.index, i, est.objective, sent, i in rnd.broadcasters))
        for i in rnd.broadcasters:
            broadcast[i] = estimates[i].position
        history[rnd.index] = {i: e.position.copy() for i, e in new_est.items()}
    return SchemeResult(estimates, log, len(schedule) - 1, history)

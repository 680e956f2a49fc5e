"""Non-robust distributed ML (single propagation mode, closed-form p0 and
alpha sub-estimators, consensus averaging) and the centralized weighted
least-squares benchmark with known link modes and channel parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph
from .channel import D_MIN, ChannelParams, MeasurementSet
from .optim import OptimizerConfig, grid_search_2d, polish_2d, solve_least_squares
from .robust import (LocalInformation, NodeEstimate, PreconditionError, RoundLogEntry, SchemeResult,
                     Status, gather_information, require_compatible)

_C = 10.0 / np.log(10.0)


class DegenerateGeometryError(ValueError):
    """All anchors are equidistant from the candidate point, so alpha is undefined."""


@dataclass(frozen=True)
class SearchConfig:
    box: tuple = (0.0, 100.0, 0.0, 100.0)
    resolution: float = 1.0
    passes: int = 2
    factor: int = 10
    polish: bool = True

    @property
    def cell(self) -> float:
        return self.resolution / self.factor ** self.passes

    def search(self, objective, extra_points=None):
        """Lattice search with zoomed passes, then an optional continuous polish."""
        x, val = grid_search_2d(objective, self.box, self.resolution, self.passes, self.factor,
                                extra_points=extra_points)
        if self.polish:
            x, val = polish_2d(objective, x, val, self.box, self.cell)
        return x, val


DEFAULT_SEARCH = SearchConfig()


@dataclass(frozen=True)
class DmlLocalFit:
    node: int
    p0_hat: float
    alpha_hat: float
    x_hat: np.ndarray
    objective: float = float("nan")


@dataclass(frozen=True)
class ConsensusParams:
    p0: float
    alpha: float


def _log_dist(points, refs) -> np.ndarray:
    """10*log10 distances, shape ``(M, L)`` for ``points (M, 2)``, ``refs (L, 2)``."""
    p = np.atleast_2d(np.asarray(points, float))
    d = np.linalg.norm(p[:, None, :] - np.asarray(refs, float)[None], axis=-1)
    return _C * np.log(np.maximum(d, D_MIN))


def center(v) -> np.ndarray:
    """Orthogonal projection onto the complement of the all-ones vector."""
    v = np.asarray(v, float)
    return v - v.mean(axis=-1, keepdims=True)


def dml_p0_hat(alpha: float, x, anchor_positions, rbar) -> float:
    rbar = np.asarray(rbar, float)
    if rbar.size == 0:
        raise ValueError("at least one anchor measurement is required")
    s = _log_dist(x, anchor_positions)[0]
    return float(np.mean(rbar + alpha * s))


def dml_alpha_hat(x, anchor_positions, rbar) -> float:
    rbar = np.asarray(rbar, float)
    if rbar.size < 2:
        raise ValueError("at least two anchor measurements are required")
    st = center(_log_dist(x, anchor_positions)[0])
    sts = float(st @ st)
    if sts <= 1e-18 * max(1.0, float(np.abs(_log_dist(x, anchor_positions)).max()) ** 2):
        raise DegenerateGeometryError("anchors are equidistant from the point; alpha is undefined")
    return -float(st @ center(rbar)) / sts


def dml_profile_objective(points, anchor_positions, rbar) -> np.ndarray:
    """Residual energy after projecting out both p0 and alpha, per candidate point.

    Points where the centered log-distances vanish keep the full centered
    energy, since no alpha direction can be removed there.
    """
    rt = center(rbar)
    st = center(_log_dist(points, anchor_positions))
    sts = np.einsum("ml,ml->m", st, st)
    proj = np.einsum("ml,l->m", st, rt)
    safe = sts > 1e-18
    return float(rt @ rt) - np.where(safe, proj**2 / np.where(safe, sts, 1.0), 0.0)


def dml_self_localize(anchor_positions, rbar, search: SearchConfig = DEFAULT_SEARCH, node: int = -1) -> DmlLocalFit:
    rbar = np.asarray(rbar, float)
    anchor_positions = np.asarray(anchor_positions, float).reshape(-1, 2)
    if len(rbar) < graph.MIN_REFERENCES:
        raise PreconditionError("self-localization in 2D needs at least three anchors")
    x, val = search.search(lambda P: dml_profile_objective(P, anchor_positions, rbar))
    alpha = dml_alpha_hat(x, anchor_positions, rbar)
    return DmlLocalFit(node, dml_p0_hat(alpha, x, anchor_positions, rbar), alpha, x, val)


def dml_consensus(fits) -> ConsensusParams:
    fits = list(fits)
    if not fits:
        raise ValueError("consensus needs at least one local fit")
    return ConsensusParams(float(np.mean([f.p0_hat for f in fits])),
                           float(np.mean([f.alpha_hat for f in fits])))


def dml_residual_objective(points, consensus: ConsensusParams, info: LocalInformation) -> np.ndarray:
    pos, r, _ = info.stacked()
    e = r - consensus.p0 + consensus.alpha * _log_dist(points, pos)
    return np.einsum("ml,ml->m", e, e)


def dml_position_update(x_seed, consensus: ConsensusParams, info: LocalInformation,
                        search: SearchConfig = DEFAULT_SEARCH) -> np.ndarray:
    if len(info) < graph.MIN_REFERENCES:
        raise PreconditionError("need at least three references (anchors plus localized agents)")
    extra = None if x_seed is None else np.asarray(x_seed, float).reshape(1, 2)
    x, _ = search.search(lambda P: dml_residual_objective(P, consensus, info), extra_points=extra)
    return x


@dataclass
class DmlResult(SchemeResult):
    fits: dict = None
    consensus: ConsensusParams | None = None


INIT_DIM, UPDATE_DIM = 4, 2


def run_dml(net: graph.DirectedNetwork, meas: MeasurementSet, search: SearchConfig = DEFAULT_SEARCH) -> DmlResult:
    """Synchronous-round simulation of the non-robust distributed scheme.

    Round 0 self-localizes agents with three or more anchors and broadcasts
    ``(p0, alpha, x, y)``; the consensus is the plain average of those local
    fits and stays frozen. Later rounds re-solve positions with the consensus
    channel; agents localized after round 0 broadcast their position only.
    """
    require_compatible(net)
    schedule = graph.update_schedule(net)
    anchors = net.anchor_positions
    positions: dict = {}
    fits: dict = {}
    broadcast: dict = {}
    log: list = []
    history: dict = {}
    status: dict = {}
    consensus = None
    for rnd in schedule:
        new = {}
        for i in rnd.solvers:
            if rnd.index == 0:
                a_ids = sorted(graph.neighborhoods(net, i)[1])
                idx = [a - net.num_agents for a in a_ids]
                fit = dml_self_localize(anchors[idx], meas.rbar[a_ids, i], search, node=i)
                fits[i] = fit
                new[i] = (fit.x_hat, fit.objective)
            else:
                info = gather_information(net, meas, i, rnd.hat_gamma_u[i], broadcast)
                x = dml_position_update(positions.get(i), consensus, info, search)
                new[i] = (x, float(dml_residual_objective(x[None], consensus, info)[0]))
        if rnd.index == 0:
            consensus = dml_consensus(fits[i] for i in sorted(fits))
        for i, (x, obj) in new.items():
            positions[i] = x
            status[i] = Status.SELF_LOCALIZED if rnd.index == 0 else Status.UPDATED
            dim = INIT_DIM if rnd.index == 0 else UPDATE_DIM
            sent = dim * len(net.agent_receivers(i)) if i in rnd.broadcasters else 0
            log.append(RoundLogEntry(rnd.index, i, obj, sent, i in rnd.broadcasters))
        for i in rnd.broadcasters:
            broadcast[i] = positions[i]
        history[rnd.index] = {i: x.copy() for i, (x, _) in new.items()}
    estimates = []
    for i in range(net.num_agents):
        if i in positions:
            r = max(k for k, h in history.items() if i in h)
            estimates.append(NodeEstimate(i, positions[i], status=status[i], round=r))
        else:
            estimates.append(NodeEstimate(i, None))
    return DmlResult(estimates, log, len(schedule) - 1, history, fits=fits, consensus=consensus)


# --------------------------------------------------------------------------
# centralized benchmark

def _link_arrays(net: graph.DirectedNetwork, meas: MeasurementSet, los, eta: ChannelParams, K: int):
    mask = np.array(net.observation[:, : net.num_agents], copy=True)
    src, dst = np.nonzero(mask & np.isfinite(meas.rbar[:, : net.num_agents]))
    los = np.asarray(los, bool)[src, dst]
    p0 = np.where(los, eta.p0_los, eta.p0_nlos)
    alpha = np.where(los, eta.alpha_los, eta.alpha_nlos)
    w = np.sqrt(K / np.where(los, eta.var_los, eta.var_nlos))
    return src, dst, meas.rbar[src, dst], p0, alpha, w


def cmle_objective(x_agents, net, meas, los, eta: ChannelParams, K: int | None = None) -> float:
    """Weighted squared-residual sum over all links into agents."""
    K = meas.K if K is None else K
    src, dst, r, p0, alpha, w = _link_arrays(net, meas, los, eta, K)
    X = np.vstack([np.asarray(x_agents, float).reshape(-1, 2), net.anchor_positions])
    d = np.maximum(np.linalg.norm(X[src] - X[dst], axis=1), D_MIN)
    return float(np.sum((w * (r - p0 + alpha * _C * np.log(d))) ** 2))


def _anchor_only_seed(net, meas, los, eta, K, i, box, resolution=1.0):
    a_ids = sorted(graph.neighborhoods(net, i)[1])
    if not a_ids:
        return None
    pos = net.anchor_positions[[a - net.num_agents for a in a_ids]]
    lo = np.asarray(los, bool)[a_ids, i]
    p0 = np.where(lo, eta.p0_los, eta.p0_nlos)
    al = np.where(lo, eta.alpha_los, eta.alpha_nlos)
    w2 = K / np.where(lo, eta.var_los, eta.var_nlos)
    r = meas.rbar[a_ids, i]

    def f(P):
        e = r - p0 + al * _log_dist(P, pos)
        return (w2 * e * e).sum(axis=1)

    x, _ = grid_search_2d(f, box, resolution, passes=1, factor=10)
    return x


def cmle_solve(net: graph.DirectedNetwork, meas: MeasurementSet, los, eta: ChannelParams,
               seeds=(), box=(0.0, 100.0, 0.0, 100.0),
               config: OptimizerConfig = OptimizerConfig(max_iter=2000, ftol=1e-12, xtol=1e-10)) -> np.ndarray:
    """Joint weighted NLS over all agent positions with oracle modes and channel.

    Starts: the supplied ``seeds`` (e.g. distributed estimates), per-agent
    anchor-only fits under the known channel, and anchor-centroid replicates.
    """
    nu = net.num_agents
    if nu == 0:
        return np.zeros((0, 2))
    report = graph.compatibility_test(net)
    if not report.compatible:
        white = [i for i, k in enumerate(report.coloring_order) if k is None]
        raise ValueError(f"configuration is not localizable; agents never reachable: {white}")
    K = meas.K
    src, dst, r, p0, alpha, w = _link_arrays(net, meas, los, eta, K)
    anchors = net.anchor_positions
    x0, x1, y0, y1 = box

    def residuals(z):
        X = np.vstack([z.reshape(nu, 2), anchors])
        d = np.maximum(np.linalg.norm(X[src] - X[dst], axis=1), D_MIN)
        return w * (r - p0 + alpha * _C * np.log(d))

    def jacobian(z):
        X = np.vstack([z.reshape(nu, 2), anchors])
        diff = X[dst] - X[src]
        d2 = np.maximum(np.einsum("ij,ij->i", diff, diff), D_MIN**2)
        g = (w * alpha * _C / d2)[:, None] * diff  # derivative w.r.t. the receiver
        J = np.zeros((len(src), 2 * nu))
        rows = np.arange(len(src))
        for k in range(2):
            np.add.at(J, (rows, 2 * dst + k), g[:, k])
            agent_src = src < nu
            np.add.at(J, (rows[agent_src], 2 * src[agent_src] + k), -g[agent_src, k])
        return J

    centroid = anchors.mean(axis=0)
    starts = [np.asarray(s, float).reshape(-1) for s in seeds]
    anchor_fit = [_anchor_only_seed(net, meas, los, eta, K, i, box) for i in range(nu)]
    starts.append(np.concatenate([centroid if a is None else a for a in anchor_fit]))
    # replicate the centroid with a small deterministic spread so agent-agent
    # distances are not all clamped
    ring = 1.0 * np.column_stack([np.cos(2 * np.pi * np.arange(nu) / max(nu, 1)),
                                  np.sin(2 * np.pi * np.arange(nu) / max(nu, 1))])
    starts.append((centroid + ring).reshape(-1))
    lower = np.tile([x0, y0], nu)
    upper = np.tile([x1, y1], nu)
    res = solve_least_squares(residuals, starts, lower, upper, jac=jacobian, config=config)
    return res.x.reshape(nu, 2)

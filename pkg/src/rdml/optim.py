"""Box-constrained minimisation helpers shared by the estimators.

Constraints are enforced by reparameterisation: each coordinate is mapped to
an unbounded variable (``identity``, ``log`` or ``logit``) and the local
search runs in that space, so every evaluated point is feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize as _sp
from scipy.special import expit, logit

_EDGE = 1e-12
TRANSFORMS = ("identity", "log", "logit")


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoxSpec:
    lower: tuple
    upper: tuple
    transforms: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        tf = tuple(self.transforms)
        if not len(lo) == len(hi) == len(tf):
            raise ValueError("lower, upper and transforms must have equal length")
        for a, b, t in zip(lo, hi, tf):
            if t not in TRANSFORMS:
                raise ValueError(f"unknown transform {t!r}")
            if not a < b:
                raise ValueError("each lower bound must be below its upper bound")
            if t == "log" and not (np.isfinite(a) and np.isinf(b)):
                raise ValueError("log transform needs a finite lower and infinite upper bound")
            if t == "logit" and not (np.isfinite(a) and np.isfinite(b)):
                raise ValueError("logit transform needs finite bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "transforms", tf)

    @classmethod
    def uniform(cls, lower, upper, transform="logit") -> "BoxSpec":
        lower, upper = np.atleast_1d(lower), np.atleast_1d(upper)
        return cls(tuple(lower), tuple(upper), (transform,) * len(lower))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def _arrays(self):
        return np.array(self.lower), np.array(self.upper), np.array(self.transforms)

    def to_unbounded(self, x) -> np.ndarray:
        lo, hi, tf = self._arrays()
        x = np.asarray(x, float)
        u = x.copy()
        m = tf == "log"
        u[m] = np.log(np.maximum(x[m] - lo[m], _EDGE))
        m = tf == "logit"
        z = (x[m] - lo[m]) / (hi[m] - lo[m])
        u[m] = logit(np.clip(z, _EDGE, 1 - _EDGE))
        m = tf == "identity"
        u[m] = np.clip(x[m], lo[m], hi[m])
        return u

    def from_unbounded(self, u) -> np.ndarray:
        lo, hi, tf = self._arrays()
        u = np.asarray(u, float)
        x = np.clip(u, lo, hi)
        m = tf == "log"
        x[m] = lo[m] + np.exp(u[m])
        m = tf == "logit"
        x[m] = lo[m] + (hi[m] - lo[m]) * expit(u[m])
        return x

    def jacobian_diag(self, u) -> np.ndarray:
        """d x / d u for each coordinate."""
        lo, hi, tf = self._arrays()
        u = np.asarray(u, float)
        d = ((u >= lo) & (u <= hi)).astype(float)
        m = tf == "log"
        d[m] = np.exp(u[m])
        m = tf == "logit"
        e = expit(u[m])
        d[m] = (hi[m] - lo[m]) * e * (1 - e)
        return d

    def contains(self, x) -> bool:
        x = np.asarray(x, float)
        return bool(np.all(x >= np.array(self.lower)) and np.all(x <= np.array(self.upper)))


@dataclass(frozen=True)
class OptimizerConfig:
    multistart: int = 26
    max_iter: int = 4000
    ftol: float = 1e-10
    xtol: float = 1e-8
    refine_factor: int = 10
    simplex_step: float = 0.25

    def __post_init__(self):
        if min(self.multistart, self.max_iter, self.refine_factor) < 1:
            raise ValueError("counts must be positive")
        if not (0 < self.ftol < 1 and 0 < self.xtol < 1 and self.simplex_step > 0):
            raise ValueError("tolerances must lie in (0, 1)")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    seed_index: int
    seed_values: np.ndarray
    nfev: int = 0
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)


def minimize(objective: Callable, box: BoxSpec, seeds: Sequence, config: OptimizerConfig = OptimizerConfig(),
             grad: Callable | None = None) -> OptimResult:
    """Multi-start local minimisation of ``objective`` over ``box``.

    ``objective`` takes a point in the original (bounded) coordinates. Without
    ``grad`` each start runs a Nelder-Mead simplex in transformed coordinates;
    with ``grad`` (gradient in original coordinates) L-BFGS is used instead.
    Seeds whose objective is non-finite are skipped; when more than
    ``config.multistart`` seeds are given only the best ones by initial value
    are descended. Ties go to the lowest seed index.
    """
    seeds = [np.asarray(s, float).reshape(box.dim) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    us = [box.to_unbounded(s) for s in seeds]
    values = np.array([_safe(objective, box.from_unbounded(u)) for u in us])
    finite = np.flatnonzero(np.isfinite(values))
    if finite.size == 0:
        raise OptimizationError("objective is non-finite at every seed")
    order = finite[np.argsort(values[finite], kind="stable")][: config.multistart]

    def f_u(u):
        v = _safe(objective, box.from_unbounded(u))
        return v if np.isfinite(v) else 1e300

    best = None
    nfev = 0
    for k in sorted(order):
        u0 = us[k]
        if grad is None:
            step = config.simplex_step
            simplex = np.vstack([u0] + [u0 + step * e for e in np.eye(box.dim)])
            res = _sp.minimize(f_u, u0, method="Nelder-Mead",
                               options={"initial_simplex": simplex, "maxiter": config.max_iter,
                                        "maxfev": 4 * config.max_iter, "xatol": config.xtol,
                                        "fatol": config.ftol, "adaptive": box.dim > 4})
        else:
            def fg(u):
                x = box.from_unbounded(u)
                v = _safe(objective, x)
                if not np.isfinite(v):
                    return 1e300, np.zeros_like(u)
                return v, np.asarray(grad(x), float) * box.jacobian_diag(u)
            res = _sp.minimize(fg, u0, jac=True, method="L-BFGS-B",
                               options={"maxiter": config.max_iter, "ftol": config.ftol,
                                        "gtol": config.xtol})
        nfev += res.nfev
        fun, u = float(res.fun), res.x
        if fun > values[k]:  # never return worse than the seed itself
            fun, u = float(values[k]), u0
        if best is None or fun < best[0]:
            best = (fun, u, k, bool(res.success))
    fun, u, k, ok = best
    return OptimResult(box.from_unbounded(u), fun, int(k), values, nfev, ok)


def _safe(f, x) -> float:
    with np.errstate(all="ignore"):
        try:
            v = float(f(x))
        except (FloatingPointError, ZeroDivisionError, OverflowError):
            return np.inf
    return v if np.isfinite(v) else np.inf


def _lattice(lo_x, hi_x, lo_y, hi_y, step):
    nx = int(np.floor((hi_x - lo_x) / step + 1e-9)) + 1
    ny = int(np.floor((hi_y - lo_y) / step + 1e-9)) + 1
    xs = lo_x + step * np.arange(nx)
    ys = lo_y + step * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def grid_search_2d(objective: Callable, bounds, resolution: float, passes: int = 2,
                   factor: int = 10, extra_points=None) -> tuple[np.ndarray, float]:
    """Exhaustive lattice search followed by ``passes`` zoomed refinements.

    ``objective`` maps an ``(M, 2)`` array of points to ``M`` values;
    ``bounds`` is ``(xmin, xmax, ymin, ymax)``. Each refinement evaluates a
    lattice with spacing divided by ``factor`` spanning one previous cell
    around the incumbent. Ties go to the lowest x, then the lowest y.
    Points in ``extra_points`` replace the lattice winner only when strictly
    better.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    x0, x1, y0, y1 = (float(b) for b in bounds)

    def evaluate(points):
        with np.errstate(all="ignore"):
            v = np.asarray(objective(points), float)
        return np.where(np.isfinite(v), v, np.inf)

    pts = _lattice(x0, x1, y0, y1, resolution)
    vals = evaluate(pts)
    k = int(np.argmin(vals))
    best, best_val = pts[k], vals[k]
    if extra_points is not None and len(extra_points):
        extra = np.clip(np.asarray(extra_points, float).reshape(-1, 2), [x0, y0], [x1, y1])
        ev = evaluate(extra)
        j = int(np.argmin(ev))
        if ev[j] < best_val:
            best, best_val = extra[j], ev[j]
    if not np.isfinite(best_val):
        raise OptimizationError("objective is non-finite on the whole grid")
    step = resolution
    for _ in range(passes):
        fine = step / factor
        offs = fine * np.arange(-factor, factor + 1)
        gx, gy = np.meshgrid(best[0] + offs, best[1] + offs, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        inside = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        pts = pts[inside]
        vals = evaluate(pts)
        k = int(np.argmin(vals))
        if vals[k] < best_val or np.array_equal(pts[k], best):
            best, best_val = pts[k], vals[k]
        step = fine
    return np.array(best, float), float(best_val)


def polish_2d(objective: Callable, x, value: float, bounds, step: float,
              config: OptimizerConfig = OptimizerConfig()) -> tuple[np.ndarray, float]:
    """Nelder-Mead from a grid winner, clipped to the box; kept only when strictly better.

    ``objective`` has the vectorised ``(M, 2) -> M`` signature of
    :func:`grid_search_2d` and ``step`` sets the initial simplex size.
    """
    x0, x1, y0, y1 = (float(b) for b in bounds)
    x = np.asarray(x, float)
    lo, hi = np.array([x0, y0]), np.array([x1, y1])

    # clipping inside the objective (rather than bounding the simplex) keeps the
    # simplex from collapsing onto a box edge
    def f(p):
        with np.errstate(all="ignore"):
            v = float(np.asarray(objective(np.clip(p, lo, hi).reshape(1, 2)), float)[0])
        return v if np.isfinite(v) else 1e300

    simplex = np.vstack([x, x + [step, 0.0], x + [0.0, step]])
    res = _sp.minimize(f, x, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxiter": config.max_iter,
                                "xatol": config.xtol, "fatol": config.ftol})
    xp = np.clip(res.x, lo, hi)
    if res.fun < value:
        return xp, float(res.fun)
    return x, float(value)


def solve_least_squares(residuals: Callable, seeds: Sequence, lower, upper, jac: Callable | str = "2-point",
                        config: OptimizerConfig = OptimizerConfig()) -> OptimResult:
    """Multi-start bounded nonlinear least squares (trust-region reflective).

    Returns the best ``0.5 * ||residuals||^2`` over all starts.
    """
    seeds = [np.clip(np.asarray(s, float), lower, upper) for s in seeds]
    values = np.array([0.5 * float(np.sum(np.square(residuals(s)))) for s in seeds])
    best = None
    nfev = 0
    for k, s in enumerate(seeds):
        if not np.isfinite(values[k]):
            continue
        sol = _sp.least_squares(residuals, s, jac=jac, bounds=(lower, upper), method="trf",
                                ftol=config.ftol, xtol=config.xtol, gtol=config.ftol,
                                max_nfev=config.max_iter)
        nfev += sol.nfev
        if best is None or sol.cost < best[0]:
            best = (float(sol.cost), sol.x, k, bool(sol.success))
    if best is None:
        raise OptimizationError("residuals are non-finite at every seed")
    fun, x, k, ok = best
    return OptimResult(np.asarray(x), fun, k, values, nfev, ok)

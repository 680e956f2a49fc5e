"""Mode-dependent log-distance path-loss model and RSS measurement generation."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

D_MIN = 1e-3  # meters; distances are clamped here before log10
_LOG_2PI = math.log(2.0 * math.pi)


class Mode(enum.IntEnum):
    NLOS = 0
    LOS = 1


@dataclass(frozen=True)
class ChannelParams:
    p0_los: float
    alpha_los: float
    var_los: float
    p0_nlos: float
    alpha_nlos: float
    var_nlos: float

    def __post_init__(self):
        if not (self.alpha_los > 0 and self.alpha_nlos > 0):
            raise ValueError("path-loss exponents must be positive")
        if not (self.var_nlos > self.var_los > 0):
            raise ValueError("need var_nlos > var_los > 0")

    def mode(self, mode) -> tuple[float, float, float]:
        if Mode(mode) is Mode.LOS:
            return self.p0_los, self.alpha_los, self.var_los
        return self.p0_nlos, self.alpha_nlos, self.var_nlos

    def as_array(self) -> np.ndarray:
        return np.array([self.p0_los, self.alpha_los, self.var_los,
                         self.p0_nlos, self.alpha_nlos, self.var_nlos])

    @classmethod
    def from_array(cls, a) -> "ChannelParams":
        return cls(*(float(v) for v in a))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def log_distance(x_from, x_to) -> np.ndarray:
    """10*log10 of the (clamped) distance; broadcasts over leading axes."""
    d = np.linalg.norm(np.asarray(x_from, float) - np.asarray(x_to, float), axis=-1)
    return 10.0 * np.log10(np.maximum(d, D_MIN))


def mean_rss(params: ChannelParams, mode, x_from, x_to):
    p0, alpha, _ = params.mode(mode)
    return p0 - alpha * log_distance(x_from, x_to)


@dataclass(frozen=True)
class NoiseModel:
    """Per-mode noise distribution; ``'student_t'`` draws are rescaled so their
    variance matches the configured channel variance."""

    los: str = "gaussian"
    nlos: str = "gaussian"
    nu: float = 5.0

    def __post_init__(self):
        for kind in (self.los, self.nlos):
            if kind not in ("gaussian", "student_t"):
                raise ValueError(f"unknown noise kind {kind!r}")
        if "student_t" in (self.los, self.nlos) and not self.nu > 2:
            raise ValueError("Student-t noise needs nu > 2 for a finite variance")

    def kind(self, mode) -> str:
        return self.los if Mode(mode) is Mode.LOS else self.nlos

    def draw(self, mode, var: float, size, rng: np.random.Generator) -> np.ndarray:
        sd = math.sqrt(var)
        if self.kind(mode) == "student_t":
            return sd * math.sqrt((self.nu - 2.0) / self.nu) * rng.standard_t(self.nu, size=size)
        return sd * rng.standard_normal(size)


GAUSSIAN = NoiseModel()


def time_average(samples) -> float:
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("cannot average an empty sample set")
    return float(s.mean())


@dataclass(frozen=True, eq=False)
class LinkMeasurement:
    src: int
    dst: int
    mode: Mode
    samples: np.ndarray
    average: float

    @property
    def K(self) -> int:
        return len(self.samples)


def sample_link(params: ChannelParams, mode, x_from, x_to, K: int,
                noise: NoiseModel = GAUSSIAN, rng: np.random.Generator | None = None,
                src: int = -1, dst: int = -1) -> LinkMeasurement:
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    mode = Mode(mode)
    mu = float(mean_rss(params, mode, x_from, x_to))
    samples = mu + noise.draw(mode, params.mode(mode)[2], K, rng)
    samples.setflags(write=False)
    return LinkMeasurement(src, dst, mode, samples, time_average(samples))


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Time-averaged RSS for every observed directed link.

    ``rbar[j, i]`` is the average over ``K`` samples of link ``j -> i`` and is
    NaN where no link was observed. Per-sample values are kept in ``samples``
    (shape ``(N, N, K)``) when available.
    """

    K: int
    rbar: np.ndarray
    samples: np.ndarray | None = None

    def __post_init__(self):
        rbar = np.array(self.rbar, dtype=float)
        rbar.setflags(write=False)
        object.__setattr__(self, "rbar", rbar)
        if self.samples is not None:
            s = np.array(self.samples, dtype=float)
            s.setflags(write=False)
            object.__setattr__(self, "samples", s)

    def has(self, j: int, i: int) -> bool:
        return bool(np.isfinite(self.rbar[j, i]))

    def links(self, los: np.ndarray | None = None) -> Iterator[LinkMeasurement]:
        for j, i in zip(*np.nonzero(np.isfinite(self.rbar))):
            mode = Mode.LOS if los is None or los[j, i] else Mode.NLOS
            samples = self.samples[j, i] if self.samples is not None else np.array([self.rbar[j, i]])
            yield LinkMeasurement(int(j), int(i), mode, samples, float(self.rbar[j, i]))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.K).tobytes())
        h.update(np.ascontiguousarray(self.rbar).tobytes())
        return h.hexdigest()


def sample_network(net, positions, params: ChannelParams, K: int,
                   noise: NoiseModel = GAUSSIAN, rng: np.random.Generator | None = None,
                   keep_samples: bool = False, receivers: str = "agents") -> MeasurementSet:
    """Draw ``K`` samples on every observed link and time-average them.

    ``positions`` holds every node (agents first). Only links into agents are
    sampled unless ``receivers='all'``; anchors never localize.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    pos = np.asarray(positions, dtype=float)
    n = net.num_nodes
    mask = np.array(net.observation, copy=True)
    if receivers == "agents":
        mask[:, net.num_agents:] = False
    src, dst = np.nonzero(mask)
    s = log_distance(pos[src], pos[dst])
    los = net.los[src, dst]
    mu = np.where(los, params.p0_los - params.alpha_los * s, params.p0_nlos - params.alpha_nlos * s)
    draws = np.empty((len(src), K))
    for mode, sel in ((Mode.LOS, los), (Mode.NLOS, ~los)):
        draws[sel] = noise.draw(mode, params.mode(mode)[2], (int(sel.sum()), K), rng)
    samples = mu[:, None] + draws
    rbar = np.full((n, n), np.nan)
    rbar[src, dst] = samples.mean(axis=1)
    full = None
    if keep_samples:
        full = np.full((n, n, K), np.nan)
        full[src, dst] = samples
    return MeasurementSet(K, rbar, full)


def gaussian_log_pdf(r, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * (r - mean) ** 2 / var


def mixture_log_pdf(rbar: float, x_from, x_to, lam: float, params: ChannelParams, K: int) -> float:
    """Log-density of a time-averaged RSS under the two-component LoS/NLoS mixture.

    The LoS component has weight ``lam`` and variance ``var_los / K``; the NLoS
    component has weight ``1 - lam`` and variance ``var_nlos / K``.
    """
    if not np.isfinite(rbar):
        raise ValueError("rbar must be finite")
    s = log_distance(x_from, x_to)
    return float(mixture_log_terms(np.asarray(rbar, float), s, lam, params.as_array(), K))


def mixture_log_terms(rbar, s, w, eta, K):
    """Vectorised mixture log-density from log-distances ``s`` and weights ``w``.

    ``eta`` is ``(p0_los, alpha_los, var_los, p0_nlos, alpha_nlos, var_nlos)``
    and may carry leading batch axes.
    """
    eta = np.asarray(eta, float)
    p0l, al, vl, p0n, an, vn = (eta[..., k, None] if eta.ndim > 1 else eta[k] for k in range(6))
    w = np.asarray(w, float)
    with np.errstate(divide="ignore"):
        la = np.log(w) + gaussian_log_pdf(rbar, p0l - al * s, vl / K)
        lb = np.log1p(-w) + gaussian_log_pdf(rbar, p0n - an * s, vn / K)
    return np.logaddexp(la, lb)


def sample_log_likelihood(samples, mean, var) -> float:
    """Gaussian log-likelihood of i.i.d. samples sharing one mean."""
    y = np.asarray(samples, float)
    return float(np.sum(gaussian_log_pdf(y, mean, var)))


def averaged_log_likelihood(rbar, mean, var, K: int) -> float:
    """Log-density of the time average, which is N(mean, var / K)."""
    return float(gaussian_log_pdf(rbar, mean, var / K))

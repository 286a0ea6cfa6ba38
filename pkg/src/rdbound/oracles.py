"""Exact rate-distortion references.

Closed forms for the Gaussian/MSE and Bernoulli/Hamming cases, plus a
Blahut-Arimoto solver for any finite source. Rates are in nats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscreteSourceSpec:
    """Source pmf ``probabilities`` and a ``distortion[x, x_hat]`` matrix."""

    probabilities: np.ndarray
    distortion: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        d = np.asarray(self.distortion, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities must be non-negative and sum to 1 (sum={p.sum()!r})")
        if d.ndim != 2 or d.shape[0] != p.size:
            raise ValueError(f"distortion must have {p.size} rows, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("distortion entries must be finite and non-negative")
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "distortion", np.ascontiguousarray(d))

    @classmethod
    def hamming(cls, probabilities, num_reproductions: int | None = None) -> "DiscreteSourceSpec":
        p = np.asarray(probabilities, dtype=np.float64)
        m = p.size if num_reproductions is None else num_reproductions
        d = 1.0 - np.eye(p.size, m)
        return cls(p, d)

    @classmethod
    def bernoulli(cls, p1: float) -> "DiscreteSourceSpec":
        return cls.hamming([1.0 - p1, p1])


@dataclass
class OraclePoint:
    rate_nats: float
    distortion: float
    slope: float
    iterations: int
    converged: bool
    functional_trace: list[float] = field(default_factory=list, repr=False)


def _rate_and_distortion(src: DiscreteSourceSpec, q: np.ndarray, slope: float):
    p, d = src.probabilities, src.distortion
    logA = slope * (d - d.min(axis=1, keepdims=True))
    with np.errstate(divide="ignore"):
        logw = np.log(q)[None, :] + logA
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    cond = w / w.sum(axis=1, keepdims=True)  # Q(x_hat | x)
    marg = p @ cond
    distortion = float(np.sum(p[:, None] * cond * d))
    mask = (cond > 0) & (p[:, None] > 0)
    ratio = np.where(mask, cond / np.where(marg > 0, marg, 1.0)[None, :], 1.0)
    rate = float(np.sum(np.where(mask, p[:, None] * cond * np.log(ratio), 0.0)))
    return max(rate, 0.0), distortion


def blahut_arimoto(
    src: DiscreteSourceSpec,
    slope: float,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    record_trace: bool = False,
) -> OraclePoint:
    """Point on R(D) where the curve has slope ``slope`` (< 0, nats per unit D).

    Iterates the reproduction marginal q(x_hat) to a fixed point; the
    residual is the max-abs change of q between iterations. Hitting
    ``max_iter`` returns ``converged=False`` and logs a warning.
    """
    if not slope < 0:
        raise ValueError(f"slope must be negative, got {slope}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    q, iters, converged, trace = kernels.ba_iterate(
        src.probabilities, src.distortion, float(slope), float(tol), int(max_iter), bool(record_trace)
    )
    if not converged:
        log.warning("Blahut-Arimoto did not converge in %d iterations (slope=%g)", iters, slope)
    rate, distortion = _rate_and_distortion(src, np.asarray(q), slope)
    return OraclePoint(rate, distortion, float(slope), int(iters), bool(converged), list(trace))


def ba_curve(
    src: DiscreteSourceSpec,
    slopes,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> list[OraclePoint]:
    points = [blahut_arimoto(src, s, tol, max_iter) for s in slopes]
    return sorted(points, key=lambda pt: (pt.distortion, -pt.rate_nats))


def ba_at_distortion(
    src: DiscreteSourceSpec,
    target: float,
    slope_range: tuple[float, float] = (-60.0, -1e-6),
    xtol: float = 1e-12,
    **kwargs,
) -> OraclePoint:
    """Bisect the slope until the BA distortion matches ``target``."""
    lo, hi = slope_range  # distortion increases with slope
    pt = blahut_arimoto(src, hi, **kwargs)
    if pt.distortion <= target:
        return pt
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        pt = blahut_arimoto(src, mid, **kwargs)
        if pt.distortion > target:
            hi = mid
        else:
            lo = mid
        if hi - lo < xtol:
            break
    return pt


def gaussian_rd(variance: float, distortion: float) -> float:
    """R(D) = max(0, 0.5 ln(variance / D)) for a Gaussian source under MSE."""
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    if not distortion > 0:
        raise ValueError(f"distortion must be positive, got {distortion}")
    return max(0.0, 0.5 * math.log(variance / distortion))


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log(p) - (1.0 - p) * math.log1p(-p)


def bernoulli_hamming_rd(p: float, distortion: float) -> float:
    """H_b(p) - H_b(D) in nats, zero once D >= min(p, 1 - p)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if distortion < 0.0:
        raise ValueError(f"distortion must be non-negative, got {distortion}")
    if distortion >= min(p, 1.0 - p):
        return 0.0
    return binary_entropy(p) - binary_entropy(distortion)

"""Numerical kernels shared by the model, training loop and evaluation.

Functions accept numpy arrays / python scalars, and the ones used inside
the network (``smooth_mu``, ``gaussian_kl``) also accept torch tensors and
stay differentiable. All rates are in nats; bits only appear in
``nats_to_bpp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from . import kernels

LOG2E = math.log2(math.e)


class InvalidNetworkOutput(ValueError):
    """A network output that feeds a distribution parameter was NaN or inf."""


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_min: float = 4.0
    lambda_max: float = 2048.0

    def __post_init__(self):
        if not (0 < self.lambda_min < self.lambda_max):
            raise ValueError(
                f"need 0 < lambda_min < lambda_max, got "
                f"({self.lambda_min}, {self.lambda_max})"
            )

    def contains(self, lmb: float) -> bool:
        return self.lambda_min <= lmb <= self.lambda_max


DEFAULT_SCHEDULE = LambdaSchedule()


def _is_tensor(x: Any) -> bool:
    return isinstance(x, torch.Tensor)


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian given by element-wise ``mean`` and ``stddev``."""

    mean: Any
    stddev: Any

    def __post_init__(self):
        mshape = tuple(self.mean.shape) if hasattr(self.mean, "shape") else ()
        sshape = tuple(self.stddev.shape) if hasattr(self.stddev, "shape") else ()
        if mshape != sshape:
            raise ValueError(f"mean shape {mshape} != stddev shape {sshape}")
        if _is_tensor(self.stddev):
            positive = bool((self.stddev > 0).all())
        else:
            positive = bool(np.all(np.asarray(self.stddev) > 0))
        if not positive:
            raise ValueError("stddev must be strictly positive")


# --------------------------------------------------------------------------
# smoothing function for mean heads


class _SmoothMu(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a):
        t = a.abs()
        pos = t > 0
        safe = torch.where(pos, t, torch.ones_like(t))
        g = 1.0 - 0.5 * torch.tanh(safe)
        powed = torch.pow(safe, g)
        ctx.save_for_backward(safe, g, powed, pos)
        return torch.where(pos, torch.sign(a) * powed, torch.zeros_like(a))

    @staticmethod
    def backward(ctx, grad_out):
        safe, g, powed, pos = ctx.saved_tensors
        sech2 = 1.0 - torch.tanh(safe) ** 2
        d = powed * (-0.5 * sech2 * torch.log(safe) + g / safe)
        d = torch.where(pos, d, torch.ones_like(d))
        return grad_out * d


def _check_finite(a) -> None:
    ok = bool(torch.isfinite(a).all()) if _is_tensor(a) else bool(np.all(np.isfinite(a)))
    if not ok:
        raise InvalidNetworkOutput("non-finite value passed to smooth_mu")


def smooth_mu(a):
    """sign(a) * |a| ** (1 - 0.5 * tanh|a|), with the value at 0 defined as 0.

    Grows like sqrt|a| for large |a| so the squared mean difference in the
    KL has a bounded derivative.
    """
    _check_finite(a)
    if _is_tensor(a):
        return _SmoothMu.apply(a)
    arr = np.asarray(a, dtype=np.float64)
    out = kernels.smooth_mu(np.ascontiguousarray(arr.ravel())).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def smooth_mu_grad(a):
    """Analytic derivative of :func:`smooth_mu` (numpy only)."""
    _check_finite(a)
    arr = np.asarray(a, dtype=np.float64)
    out = kernels.smooth_mu_grad(np.ascontiguousarray(arr.ravel())).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# KL divergence


def gaussian_kl(q: GaussianParams, p: GaussianParams):
    """Element-wise KL(q || p) in nats for diagonal Gaussians.

    -1/2 + log(sp / sq) + (sq^2 + (mq - mp)^2) / (2 sp^2)
    """
    if tuple(np.shape(q.mean)) != tuple(np.shape(p.mean)):
        raise ValueError(
            f"shape mismatch: q {tuple(np.shape(q.mean))} vs p {tuple(np.shape(p.mean))}"
        )
    if _is_tensor(q.mean) or _is_tensor(p.mean):
        # grouped so that q == p gives exactly log(1) + (0.5 - 0.5) = 0
        kl = torch.log(p.stddev / q.stddev) + (
            (q.stddev**2 + (q.mean - p.mean) ** 2) / (2 * p.stddev**2) - 0.5
        )
        return kl.clamp_min(0.0)
    mq, sq = np.asarray(q.mean, np.float64), np.asarray(q.stddev, np.float64)
    mp, sp = np.asarray(p.mean, np.float64), np.asarray(p.stddev, np.float64)
    kl = np.log(sp / sq) + ((sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5)
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def gaussian_kl_grad(q: GaussianParams, p: GaussianParams) -> dict[str, np.ndarray]:
    """Partial derivatives of :func:`gaussian_kl` w.r.t. each parameter."""
    mq, sq = np.asarray(q.mean, np.float64), np.asarray(q.stddev, np.float64)
    mp, sp = np.asarray(p.mean, np.float64), np.asarray(p.stddev, np.float64)
    diff = mq - mp
    return {
        "q_mean": diff / sp**2,
        "q_stddev": -1.0 / sq + sq / sp**2,
        "p_mean": -diff / sp**2,
        "p_stddev": 1.0 / sp - (sq**2 + diff**2) / sp**3,
    }


# --------------------------------------------------------------------------
# lambda handling


def sample_lambda(rng: np.random.Generator, sched: LambdaSchedule = DEFAULT_SCHEDULE) -> float:
    """Draw lambda log-uniformly from ``[lambda_min, lambda_max]``."""
    lo, hi = math.log(sched.lambda_min), math.log(sched.lambda_max)
    lmb = math.exp(rng.uniform(lo, hi))
    return min(max(lmb, sched.lambda_min), sched.lambda_max)


def embed_lambda(
    lmb: float,
    dim: int = 256,
    sched: LambdaSchedule = DEFAULT_SCHEDULE,
    max_freq: float = 1000.0,
) -> np.ndarray:
    """Sinusoidal embedding of log(lambda) rescaled to [0, 1] over ``sched``.

    Frequencies are geometrically spaced in ``[1, max_freq]``. The lowest
    frequency alone keeps the map injective on the schedule range.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    if lmb <= 0:
        raise ValueError(f"lambda must be positive, got {lmb}")
    lo, hi = math.log(sched.lambda_min), math.log(sched.lambda_max)
    t = (math.log(lmb) - lo) / (hi - lo)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half)) if half > 1 else np.ones(1)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


# --------------------------------------------------------------------------
# unit conversions


def nats_to_bpp(total_nats: float, num_pixels: int) -> float:
    if total_nats < 0:
        raise ValueError(f"rate cannot be negative, got {total_nats} nats")
    if num_pixels < 1:
        raise ValueError(f"num_pixels must be >= 1, got {num_pixels}")
    return total_nats * LOG2E / num_pixels


def mse_to_psnr(mse: float) -> float:
    """PSNR in dB for pixels on the [0, 1] scale."""
    if not mse > 0:
        raise ValueError(f"PSNR is undefined for mse={mse}")
    return -10.0 * math.log10(mse)

"""Variable-rate training on the per-pixel Lagrangian

    loss = sum_i KL_i / P + lambda * MSE(x, x_hat)

with a fresh log-uniform lambda at every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .data import SourceSpec, make_batch, to_model_input
from .model import ForwardResult, HVAE, TrainingInstabilityError
from .rd_math import DEFAULT_SCHEDULE, LambdaSchedule, sample_lambda

log = logging.getLogger(__name__)

MAX_RETRIES = 3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200_000
    batch_size: int = 32
    learning_rate: float = 2e-4
    lambda_schedule: LambdaSchedule = DEFAULT_SCHEDULE
    patch_size: int = 64
    seed: int = 0
    smoothing_enabled: bool = True
    clip_norm: float | None = 2.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("steps, batch_size and patch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")


@dataclass
class LossBreakdown:
    kl_total: float  # nats per image, batch mean
    distortion: float  # MSE on the [0, 1] scale
    lmb: float
    loss: float
    num_pixels: int = 1
    kl_per_latent: list[float] = field(default_factory=list, repr=False)
    value: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def csv(self, step: int) -> str:
        return f"{step},{self.lmb!r},{self.kl_total!r},{self.distortion!r},{self.loss!r}"


def loss(forward: ForwardResult, x: torch.Tensor, lmb: float) -> LossBreakdown:
    """Rate term divided by the pixel count, plus lambda times the MSE."""
    xhat = forward.reconstruction
    if xhat.shape != x.shape:
        raise ValueError(f"reconstruction {tuple(xhat.shape)} vs input {tuple(x.shape)}")
    num_pixels = x.shape[-2] * x.shape[-1]
    kl = forward.kl_total  # (B,)
    mse = (xhat - x).pow(2).flatten(1).mean(dim=1)  # (B,)
    value = (kl / num_pixels + lmb * mse).mean()
    per_latent = [float(k.detach().mean()) for k in forward.kl_per_latent]
    br = LossBreakdown(
        kl_total=float(kl.detach().mean()),
        distortion=float(mse.detach().mean()),
        lmb=float(lmb),
        loss=float(value.detach()),
        num_pixels=num_pixels,
        kl_per_latent=per_latent,
        value=value,
    )
    if not math.isfinite(br.loss):
        raise TrainingInstabilityError(
            f"non-finite loss at lambda={lmb:g}",
            details={"lambda": lmb, "kl_per_latent": per_latent, "mse": br.distortion},
        )
    return br


@dataclass
class TrainResult:
    model: HVAE
    history: list[LossBreakdown]
    optimizer: torch.optim.Optimizer
    step: int


Callback = Callable[[int, LossBreakdown], None]


def train(
    model: HVAE,
    source: SourceSpec,
    cfg: TrainConfig,
    callbacks: Iterable[Callback] = (),
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    metadata: dict | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps (continuing from ``resume`` if given).

    Randomness comes only from ``cfg.seed``: one numpy generator for lambda
    and batches, one torch generator for latent noise. A non-finite loss is
    retried on a fresh batch up to three times, then re-raised.
    """
    if cfg.patch_size % model.config.coarsest_downsample:
        raise ValueError(
            f"patch_size {cfg.patch_size} is not divisible by {model.config.coarsest_downsample}"
        )
    sched = cfg.lambda_schedule
    if (sched.lambda_min, sched.lambda_max) != (model.config.lambda_min, model.config.lambda_max):
        raise ValueError("training lambda range differs from the model's embedding range")
    model.smoothing = cfg.smoothing_enabled
    model.train()

    np_rng = np.random.default_rng(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    start = 0
    if resume is not None:
        start = resume.step
        if resume.optimizer_moments:
            optimizer.load_state_dict(resume.optimizer_state_dict(optimizer))
        # streams keyed on the resume step; not bit-identical to an uninterrupted run
        np_rng = np.random.default_rng([cfg.seed, start])
        noise = torch.Generator().manual_seed(cfg.seed * 1_000_003 + start)

    callbacks = list(callbacks)
    history: list[LossBreakdown] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for step in range(start + 1, cfg.steps + 1):
            lmb = sample_lambda(np_rng, sched)
            br = _step_with_retries(model, source, cfg, lmb, np_rng, noise)
            optimizer.zero_grad(set_to_none=True)
            br.value.backward()
            if cfg.clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            br.value = None
            history.append(br)
            if log_file:
                log_file.write(br.csv(step) + "\n")
            for cb in callbacks:
                cb(step, br)
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, step, optimizer, metadata)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, cfg.steps, optimizer, metadata)
    return TrainResult(model, history, optimizer, cfg.steps)


def _step_with_retries(model, source, cfg, lmb, np_rng, noise) -> LossBreakdown:
    last: TrainingInstabilityError | None = None
    for attempt in range(MAX_RETRIES + 1):
        x = to_model_input(make_batch(source, cfg.patch_size, cfg.batch_size, np_rng))
        try:
            fwd = model.forward_train(x, lmb, noise)
            return loss(fwd, x, lmb)
        except TrainingInstabilityError as e:
            last = e
            log.warning("unstable step (attempt %d, lambda=%g): %s", attempt + 1, lmb, e)
    assert last is not None
    raise TrainingInstabilityError(
        f"loss stayed non-finite after {MAX_RETRIES} retries at lambda={lmb:g}: {last}",
        latent_index=last.latent_index,
        details=last.details,
    )

"""Hierarchical ResNet-VAE with lambda-conditioned top-down blocks.

Layout: a bottom-up encoder produces one feature map per stage; the
top-down decoder starts from a learned constant at the coarsest stage and
visits the latents coarse to fine. Each latent block emits a prior
p(z_i | z_<i) from the running decoder state and a posterior
q(z_i | x, z_<i) from the state plus the encoder feature of the same
resolution (additive fusion). All top-down residual blocks are modulated by
an embedding of lambda through adaptive layer normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rd_math import GaussianParams, InvalidNetworkOutput, LambdaSchedule, embed_lambda, gaussian_kl, smooth_mu

STD_FLOOR = 1e-6
_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(x) == 1


class TrainingInstabilityError(RuntimeError):
    """Non-finite activations or loss during a forward/training step."""

    def __init__(self, message: str, latent_index: int | None = None, details: dict | None = None):
        super().__init__(message)
        self.latent_index = latent_index
        self.details = details or {}


@dataclass(frozen=True)
class StageSpec:
    downsample: int
    channel_mult: float
    num_latents: int

    def __post_init__(self):
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError(f"downsample factor must be a power of two, got {self.downsample}")
        if self.channel_mult <= 0:
            raise ValueError(f"channel multiplier must be positive, got {self.channel_mult}")
        if self.num_latents < 0:
            raise ValueError(f"num_latents must be >= 0, got {self.num_latents}")


@dataclass(frozen=True)
class ModelConfig:
    """Latent hierarchy layout. ``stages`` run coarse to fine (decoding order)."""

    base_channels: int = 32
    stages: tuple[StageSpec, ...] = (
        StageSpec(32, 4, 1),
        StageSpec(16, 4, 1),
        StageSpec(8, 4, 2),
        StageSpec(4, 2, 2),
    )
    latent_channels: int = 16
    embed_dim: int = 256
    input_channels: int = 3
    patch_size: int = 32
    enc_blocks: int = 2
    smoothing: bool = True
    lambda_min: float = 4.0
    lambda_max: float = 2048.0

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("at least one stage is required")
        if self.num_latents <= 0:
            raise ValueError("total number of latents must be positive")
        factors = [s.downsample for s in stages]
        if any(a <= b for a, b in zip(factors, factors[1:])):
            raise ValueError(
                f"downsample factors must strictly decrease from coarse to fine, got {factors}"
            )
        if factors[0] != self.patch_size:
            raise ValueError(
                f"coarsest downsample factor {factors[0]} must equal patch_size {self.patch_size}"
            )
        if self.embed_dim <= 0 or self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even and positive, got {self.embed_dim}")
        for name in ("base_channels", "latent_channels", "input_channels", "enc_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        LambdaSchedule(self.lambda_min, self.lambda_max)

    @property
    def num_latents(self) -> int:
        return sum(s.num_latents for s in self.stages)

    @property
    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.lambda_min, self.lambda_max)

    @property
    def finest_downsample(self) -> int:
        return self.stages[-1].downsample

    @property
    def coarsest_downsample(self) -> int:
        return self.stages[0].downsample

    def width(self, stage: StageSpec) -> int:
        return int(round(stage.channel_mult * self.base_channels))

    # key-value text used inside checkpoints

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stages":
                v = ",".join(f"{s.downsample}:{s.channel_mult:g}:{s.num_latents}" for s in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = (part.strip() for part in line.partition("="))
            if key not in known:
                continue  # written by a newer version
            kwargs[key] = _parse_field(key, val, getattr(defaults, key))
        return cls(**kwargs)


def parse_stages(text: str) -> tuple[StageSpec, ...]:
    """``"32:4:1,16:4:1"`` -> stages (downsample:channel_mult:num_latents)."""
    out = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"stage {chunk!r} is not downsample:mult:latents")
        out.append(StageSpec(int(parts[0]), float(parts[1]), int(parts[2])))
    return tuple(out)


def _parse_field(key, val, default):
    if key == "stages":
        return parse_stages(val)
    if isinstance(default, bool):
        if val.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{key}: expected a boolean, got {val!r}")
        return val.lower() in ("true", "1")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    return val


def full_config(base_channels: int = 128, latents=(1, 2, 3, 4, 5), **kw) -> ModelConfig:
    """Full-size layout for 64x64 patches: features at 1,2,4,8,16 px with 6C,6C,5C,4C,2C."""
    mults = (6, 6, 5, 4, 2)
    factors = (64, 32, 16, 8, 4)
    kw.setdefault("stages", tuple(StageSpec(f, m, n) for f, m, n in zip(factors, mults, latents)))
    kw.setdefault("patch_size", 64)
    kw.setdefault("latent_channels", 32)
    return ModelConfig(base_channels=base_channels, **kw)


def desk_config(**kw) -> ModelConfig:
    """Reduced image layout: 32x32 patches, features at /4 /8 /16 /32, C=32."""
    return ModelConfig(**kw)


def toy_config(**kw) -> ModelConfig:
    """Single-channel 4x4 layout for the 16-dimensional synthetic source."""
    kw.setdefault("base_channels", 16)
    kw.setdefault("enc_blocks", 1)
    kw.setdefault("latent_channels", 4)
    kw.setdefault("embed_dim", 64)
    kw.setdefault("input_channels", 1)
    kw.setdefault("patch_size", 4)
    kw.setdefault("stages", (StageSpec(4, 2, 1), StageSpec(2, 2, 1), StageSpec(1, 1, 2)))
    return ModelConfig(**kw)


PRESETS = {"full": full_config, "desk": desk_config, "toy": toy_config}


@dataclass
class ForwardResult:
    reconstruction: torch.Tensor
    kl_per_latent: list[torch.Tensor]  # each (B,), nats per image
    sampled_latents: list[torch.Tensor]
    posteriors: list[GaussianParams] = field(default_factory=list, repr=False)
    priors: list[GaussianParams] = field(default_factory=list, repr=False)

    @property
    def kl_total(self) -> torch.Tensor:
        return torch.stack(self.kl_per_latent, dim=0).sum(dim=0)


# --------------------------------------------------------------------------
# building blocks


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor, no affine."""

    def __init__(self, eps: float = 1e-6):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)


class AdaptiveNorm(nn.Module):
    """Channel layer norm followed by a per-channel scale/shift predicted from
    the lambda embedding. The modulation starts at zero (plain layer norm)."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.norm = ChannelNorm()
        self.embed_dim = embed_dim
        self.modulation = nn.Linear(embed_dim, 2 * channels)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, emb):
        if emb.shape[-1] != self.embed_dim:
            raise ValueError(f"embedding has dim {emb.shape[-1]}, expected {self.embed_dim}")
        scale, shift = self.modulation(emb).chunk(2, dim=-1)
        return self.norm(x) * (1 + scale[..., None, None]) + shift[..., None, None]


def _conv(cin, cout, k=3):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class ResBlock(nn.Module):
    """x + conv(act(conv(act(norm(x))))) with 3x3 kernels.

    ``hidden`` narrows the inner activation (bottleneck), default ``width``.
    """

    def __init__(self, width: int, embed_dim: int | None = None, hidden: int | None = None,
                 zero_last: bool = False):
        super().__init__()
        hidden = hidden or width
        self.norm = AdaptiveNorm(width, embed_dim) if embed_dim else ChannelNorm()
        self.conv1 = _conv(width, hidden)
        self.conv2 = _conv(hidden, width)
        if zero_last:
            nn.init.zeros_(self.conv2.weight)
        else:
            self.conv2.weight.data.mul_(0.5)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x, emb=None):
        h = self.norm(x, emb) if emb is not None else self.norm(x)
        h = self.conv2(F.gelu(self.conv1(F.gelu(h))))
        return x + h


class LatentBlock(nn.Module):
    def __init__(self, width: int, zdim: int, embed_dim: int):
        super().__init__()
        self.zdim = zdim
        self.prior_block = ResBlock(width, embed_dim)
        self.post_block = ResBlock(width, embed_dim, hidden=max(width // 4, 1))
        self.prior_head = _conv(width, 2 * zdim, 1)
        self.post_head = _conv(width, 2 * zdim, 1)
        self.z_proj = _conv(zdim, width, 1)
        for head in (self.prior_head, self.post_head):
            head.weight.data.mul_(0.1)
            nn.init.zeros_(head.bias)
            head.bias.data[zdim:] = _SOFTPLUS_ONE
        self.z_proj.weight.data.mul_(0.5)

    def _gaussian(self, out, smoothing: bool, mean_preact=None) -> tuple[GaussianParams, torch.Tensor]:
        a, b = out[:, : self.zdim], out[:, self.zdim :]
        if mean_preact is not None:
            a = mean_preact.expand_as(a)
        mean = smooth_mu(a) if smoothing else a
        std = F.softplus(b) + STD_FLOOR
        return GaussianParams(mean, std), a


def _randn(shape, rng) -> torch.Tensor:
    """Standard normal draws; ``rng`` may be a list with one generator per batch row."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"{len(rng)} generators for a batch of {shape[0]}")
        return torch.stack([torch.randn(shape[1:], generator=g) for g in rng])
    return torch.randn(shape, generator=rng)


# --------------------------------------------------------------------------
# model


class HVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        widths = [cfg.width(s) for s in cfg.stages]
        E = cfg.embed_dim

        self.embed_mlp = nn.Sequential(nn.Linear(E, E), nn.GELU(), nn.Linear(E, E))

        # bottom-up path (fine -> coarse)
        fine = cfg.stages[-1]
        self.stem = nn.Conv2d(cfg.input_channels, widths[-1], fine.downsample, stride=fine.downsample)
        self.enc_stages = nn.ModuleList()
        self.enc_down = nn.ModuleList()
        for k in range(len(cfg.stages) - 1, -1, -1):
            self.enc_stages.append(nn.ModuleList(ResBlock(widths[k]) for _ in range(cfg.enc_blocks)))
            if k > 0:
                r = cfg.stages[k - 1].downsample // cfg.stages[k].downsample
                self.enc_down.append(nn.Conv2d(widths[k], widths[k - 1], r, stride=r))

        # top-down path (coarse -> fine)
        self.top_state = nn.Parameter(torch.zeros(widths[0]))
        self.dec_stages = nn.ModuleList()
        self.dec_up = nn.ModuleList()
        for k, stage in enumerate(cfg.stages):
            self.dec_stages.append(
                nn.ModuleList(LatentBlock(widths[k], cfg.latent_channels, E) for _ in range(stage.num_latents))
            )
            if k + 1 < len(cfg.stages):
                r = stage.downsample // cfg.stages[k + 1].downsample
                self.dec_up.append(
                    nn.Sequential(nn.Conv2d(widths[k], widths[k + 1] * r * r, 1), nn.PixelShuffle(r))
                )
        f = fine.downsample
        self.out_norm = ChannelNorm()
        self.out_conv = nn.Conv2d(widths[-1], cfg.input_channels * f * f, 1)
        self.out_shuffle = nn.PixelShuffle(f) if f > 1 else nn.Identity()
        self.out_bias = nn.Parameter(torch.full((cfg.input_channels,), 0.5))

    # -- helpers

    @property
    def smoothing(self) -> bool:
        return self.config.smoothing

    @smoothing.setter
    def smoothing(self, value: bool) -> None:
        self.config = replace(self.config, smoothing=bool(value))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, lmb: float) -> torch.Tensor:
        if not lmb > 0:
            raise ValueError(f"lambda must be positive, got {lmb}")
        vec = embed_lambda(lmb, self.config.embed_dim, self.config.schedule)
        p = self.top_state
        return self.embed_mlp(torch.as_tensor(vec, dtype=p.dtype, device=p.device)[None])

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.input_channels:
            raise ValueError(f"expected (B, {cfg.input_channels}, H, W) input, got {tuple(x.shape)}")
        f = cfg.coarsest_downsample
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} is not divisible by {f}")

    def encode(self, x) -> list[torch.Tensor]:
        """Bottom-up features, returned coarse to fine."""
        h = self.stem(x)
        feats = []
        for i, blocks in enumerate(self.enc_stages):
            for blk in blocks:
                h = blk(h)
            feats.append(h)
            if i < len(self.enc_down):
                h = self.enc_down[i](h)
        return feats[::-1]

    def _top(self, batch: int, height: int, width: int) -> torch.Tensor:
        f = self.config.coarsest_downsample
        return self.top_state[None, :, None, None].expand(batch, -1, height // f, width // f)

    def _output(self, h) -> torch.Tensor:
        out = self.out_shuffle(self.out_conv(F.gelu(self.out_norm(h))))
        return out + self.out_bias[None, :, None, None]

    # -- passes

    def forward_train(
        self,
        x: torch.Tensor,
        lmb: float,
        rng,
        mean_preact_override: Mapping[int, torch.Tensor] | None = None,
    ) -> ForwardResult:
        """Sample every latent from its posterior and decode.

        ``mean_preact_override`` replaces the posterior mean pre-activation
        of the given latent indices; it exists for gradient probes.
        """
        self.check_input(x)
        emb = self.embed(lmb)
        feats = self.encode(x)
        h = self._top(x.shape[0], x.shape[2], x.shape[3])
        kls, zs, posts, priors = [], [], [], []
        idx = 0
        for k, blocks in enumerate(self.dec_stages):
            for blk in blocks:
                h = blk.prior_block(h, emb)
                g = blk.post_block(h + feats[k], emb)
                override = None if mean_preact_override is None else mean_preact_override.get(idx)
                try:
                    prior, _ = blk._gaussian(blk.prior_head(h), self.smoothing)
                    post, _ = blk._gaussian(blk.post_head(g), self.smoothing, override)
                except (InvalidNetworkOutput, ValueError) as e:
                    raise TrainingInstabilityError(f"latent {idx}: {e}", latent_index=idx) from e
                z = post.mean + post.stddev * _randn(post.mean.shape, rng).to(post.mean)
                kl = gaussian_kl(post, prior).flatten(1).sum(dim=1)
                if not bool(torch.isfinite(kl).all()) or not bool(torch.isfinite(z).all()):
                    raise TrainingInstabilityError(
                        f"non-finite KL or latent sample at latent {idx}", latent_index=idx
                    )
                h = h + blk.z_proj(z)
                kls.append(kl)
                zs.append(z)
                posts.append(post)
                priors.append(prior)
                idx += 1
            if k < len(self.dec_up):
                h = self.dec_up[k](h)
        xhat = self._output(h)
        if not bool(torch.isfinite(xhat).all()):
            raise TrainingInstabilityError("non-finite reconstruction", latent_index=None)
        return ForwardResult(xhat, kls, zs, posts, priors)

    @torch.no_grad()
    def forward_sample(self, lmb: float, shape: Sequence[int], rng) -> torch.Tensor:
        """Draw every latent from its prior and decode to ``shape`` (B, C, H, W)."""
        shape = tuple(shape)
        if len(shape) != 4 or shape[1] != self.config.input_channels:
            raise ValueError(f"shape must be (B, {self.config.input_channels}, H, W), got {shape}")
        f = self.config.coarsest_downsample
        if shape[2] % f or shape[3] % f:
            raise ValueError(f"spatial size {shape[2:]} is not divisible by {f}")
        emb = self.embed(lmb)
        h = self._top(shape[0], shape[2], shape[3])
        for k, blocks in enumerate(self.dec_stages):
            for blk in blocks:
                h = blk.prior_block(h, emb)
                prior, _ = blk._gaussian(blk.prior_head(h), self.smoothing)
                z = prior.mean + prior.stddev * _randn(prior.mean.shape, rng).to(prior.mean)
                h = h + blk.z_proj(z)
            if k < len(self.dec_up):
                h = self.dec_up[k](h)
        return self._output(h)

    def forward(self, x, lmb, rng=None):
        return self.forward_train(x, lmb, rng)


def build(config: ModelConfig, seed: int = 0, device: str | torch.device = "cpu") -> HVAE:
    """Construct a model with seed-deterministic initialization.

    ``device="meta"`` allocates no storage, which is enough to count the
    parameters of the full-size layouts.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        with torch.device(device):
            model = HVAE(config)
    return model


def forward_train(model: HVAE, x, lmb, rng) -> ForwardResult:
    return model.forward_train(x, lmb, rng)


def forward_sample(model: HVAE, lmb, shape, rng) -> torch.Tensor:
    return model.forward_sample(lmb, shape, rng)


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()

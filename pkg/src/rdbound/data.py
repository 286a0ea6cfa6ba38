"""Training/evaluation inputs: image folders and a synthetic Gaussian source."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp", ".ppm"}

# Synthetic draws g ~ N(0, variance) are mapped to 0.5 + g / (6 sqrt(variance))
# and clipped to [0, 1], so +-3 sigma spans the pixel range.
SYNTHETIC_PIXEL_STD = 1.0 / 6.0


@dataclass(frozen=True)
class SourceSpec:
    kind: str  # "synthetic_gaussian" or "image_directory"
    path: str | None = None
    dim: int = 16
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("synthetic_gaussian", "image_directory"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "image_directory" and not self.path:
            raise ValueError("image_directory source needs a path")
        if self.kind == "synthetic_gaussian":
            if not self.variance > 0:
                raise ValueError(f"synthetic variance must be positive, got {self.variance}")
            if self.dim < 1:
                raise ValueError(f"synthetic dim must be >= 1, got {self.dim}")

    @property
    def pixel_variance(self) -> float:
        """Variance of a synthetic component on the [0, 1] pixel scale (pre-clipping)."""
        return SYNTHETIC_PIXEL_STD**2

    def to_source_units(self, mse: float) -> float:
        """Pixel-scale MSE -> distortion in the units of the Gaussian draws."""
        return mse * self.variance / self.pixel_variance


@lru_cache(maxsize=8)
def _load_folder(path: str) -> tuple[np.ndarray, ...]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {path!r} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {path!r}")
    images = []
    for f in files:
        try:
            with Image.open(f) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", f, e)
    if not images:
        raise ValueError(f"none of the {len(files)} files in {path!r} could be read")
    return tuple(images)


def load_images(path: str, min_size: int = 1) -> list[np.ndarray]:
    """All readable images in ``path`` as HWC float arrays in [0, 1].

    Images smaller than ``min_size`` in either dimension are skipped.
    """
    images = [im for im in _load_folder(str(path)) if min(im.shape[:2]) >= min_size]
    if not images:
        raise ValueError(f"no image in {path!r} is at least {min_size}x{min_size}")
    return images


def make_batch(source: SourceSpec, patch_size: int, batch_size: int, rng: np.random.Generator) -> torch.Tensor:
    """Synthetic: (B, dim) Gaussian draws mapped to [0, 1].
    Images: (B, 3, P, P) uniformly random crops."""
    if source.kind == "synthetic_gaussian":
        g = rng.standard_normal((batch_size, source.dim))
        x = np.clip(0.5 + g * SYNTHETIC_PIXEL_STD, 0.0, 1.0)
        return torch.from_numpy(x.astype(np.float32))
    images = load_images(source.path, min_size=patch_size)
    out = np.empty((batch_size, 3, patch_size, patch_size), dtype=np.float32)
    for b in range(batch_size):
        im = images[rng.integers(len(images))]
        top = rng.integers(im.shape[0] - patch_size + 1)
        left = rng.integers(im.shape[1] - patch_size + 1)
        out[b] = im[top : top + patch_size, left : left + patch_size].transpose(2, 0, 1)
    return torch.from_numpy(out)


def to_model_input(batch: torch.Tensor, input_channels: int = 1) -> torch.Tensor:
    """Reshape flat synthetic vectors (B, dim) to square (B, 1, s, s) images."""
    if batch.dim() == 4:
        return batch
    side = math.isqrt(batch.shape[1] // input_channels)
    if input_channels * side * side != batch.shape[1]:
        raise ValueError(f"cannot lay out {batch.shape[1]} values as a square image")
    return batch.reshape(batch.shape[0], input_channels, side, side)


def heldout_set(source: SourceSpec, num: int, patch_size: int, seed: int) -> list[torch.Tensor]:
    """Evaluation inputs, one (1, C, H, W) tensor per item.

    Synthetic sources draw ``num`` fresh vectors; image folders use every
    image cropped (top-left) to the largest multiple of ``patch_size``.
    """
    if source.kind == "synthetic_gaussian":
        rng = np.random.default_rng(seed)
        flat = make_batch(source, patch_size, num, rng)
        x = to_model_input(flat)
        return [x[i : i + 1] for i in range(x.shape[0])]
    out = []
    for im in load_images(source.path, min_size=patch_size):
        h = im.shape[0] // patch_size * patch_size
        w = im.shape[1] // patch_size * patch_size
        out.append(torch.from_numpy(np.ascontiguousarray(im[:h, :w].transpose(2, 0, 1)))[None])
    return out[:num] if num else out

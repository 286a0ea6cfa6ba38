"""R-D points and curves: Monte-Carlo estimation of (U(D), D), lambda
sweeps, BD-rate, and the curve CSV format.

Curve files are UTF-8 CSV with header::

    lambda,rate_bpp,mse,psnr_db,num_images,mc_samples[,rate_se_bpp,mse_se]

Lines starting with ``#`` carry ``key: value`` metadata (``label``,
``theoretical``, ``checkpoint``, ``dataset`` ...). On load only
``rate_bpp`` and one of ``mse``/``psnr_db`` are required; ``psnr_db`` is
always recomputed from ``mse`` when ``mse`` is present.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import HVAE
from .oracles import OraclePoint, gaussian_rd
from .rd_math import LOG2E, mse_to_psnr

log = logging.getLogger(__name__)

REQUIRED_HEADER = ("lambda", "rate_bpp", "mse", "psnr_db", "num_images", "mc_samples")
OPTIONAL_COLUMNS = ("rate_se_bpp", "mse_se")


class CurveFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RDPoint:
    lmb: float | None
    rate_bpp: float
    mse: float
    psnr_db: float = 0.0  # always recomputed from mse
    num_images: int = 1
    mc_samples: int = 1
    rate_se_bpp: float | None = None
    mse_se: float | None = None

    def __post_init__(self):
        if not self.rate_bpp >= 0:
            raise ValueError(f"rate_bpp must be >= 0, got {self.rate_bpp}")
        object.__setattr__(self, "psnr_db", mse_to_psnr(self.mse))


@dataclass
class RDCurve:
    """Points sorted by ascending rate, with duplicate rates removed."""

    points: list[RDPoint]
    label: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        pts = sorted(self.points, key=lambda p: p.rate_bpp)
        kept: list[RDPoint] = []
        for p in pts:
            if kept and p.rate_bpp == kept[-1].rate_bpp:
                warnings.warn(f"dropping point with duplicate rate {p.rate_bpp}", stacklevel=3)
                continue
            kept.append(p)
        self.points = kept

    def __len__(self):
        return len(self.points)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate_bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points])

    @property
    def theoretical(self) -> bool:
        return self.metadata.get("theoretical", "false").lower() == "true"

    def diagnostics(self) -> list[str]:
        """Places where PSNR drops although the rate grows."""
        out = []
        for a, b in zip(self.points, self.points[1:]):
            if b.psnr_db < a.psnr_db:
                out.append(
                    f"PSNR decreases from {a.psnr_db:.4f} to {b.psnr_db:.4f} dB "
                    f"while rate grows {a.rate_bpp:.4f} -> {b.rate_bpp:.4f} bpp"
                )
        return out

    def hull(self) -> "RDCurve":
        """Lower convex hull in the (MSE, rate) plane, decreasing part only.

        These are the operating points that time-sharing between the
        measured ones cannot beat.
        """
        pts = sorted(self.points, key=lambda p: (p.mse, p.rate_bpp))
        hull: list[RDPoint] = []
        for p in pts:
            while len(hull) >= 2:
                a, b = hull[-2], hull[-1]
                cross = (b.mse - a.mse) * (p.rate_bpp - a.rate_bpp) - (b.rate_bpp - a.rate_bpp) * (p.mse - a.mse)
                if cross <= 0:
                    hull.pop()
                else:
                    break
            hull.append(p)
        frontier = [hull[0]] if hull else []
        for p in hull[1:]:
            if p.rate_bpp < frontier[-1].rate_bpp:
                frontier.append(p)
        meta = dict(self.metadata, view="hull")
        return RDCurve(frontier, self.label, meta)


# --------------------------------------------------------------------------
# estimation


def _image_seed(seed: int, image: int, sample: int) -> int:
    return int(np.random.SeedSequence([seed, image, sample]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _as_items(dataset) -> list[torch.Tensor]:
    if isinstance(dataset, torch.Tensor):
        if dataset.dim() != 4:
            raise ValueError("dataset tensor must be (N, C, H, W)")
        return [dataset[i : i + 1] for i in range(dataset.shape[0])]
    items = list(dataset)
    if not items:
        raise ValueError("dataset is empty")
    return [x if x.dim() == 4 else x[None] for x in items]


def _check_lambda(model: HVAE, lmb: float) -> None:
    sched = model.config.schedule
    if not sched.contains(lmb):
        raise ValueError(
            f"lambda={lmb:g} is outside the trained range "
            f"[{sched.lambda_min:g}, {sched.lambda_max:g}]; extrapolation is not supported"
        )


@torch.no_grad()
def estimate_rd_point(
    model: HVAE,
    dataset,
    lmb: float,
    mc_samples: int = 8,
    seed: int = 0,
    chunk: int = 1024,
) -> RDPoint:
    """Monte-Carlo (U(D), D) at one lambda.

    Each image is encoded ``mc_samples`` times with independent posterior
    noise; the noise of (image i, draw s) comes from a generator seeded by
    (seed, i, s), so any chunking or ordering gives the same numbers.
    Standard errors are taken over per-image averages.
    """
    _check_lambda(model, lmb)
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    items = _as_items(dataset)
    was_training = model.training
    model.eval()
    rates = np.empty((len(items), mc_samples))
    mses = np.empty((len(items), mc_samples))
    try:
        groups: dict[tuple, list[int]] = {}
        for i, x in enumerate(items):
            groups.setdefault(tuple(x.shape[1:]), []).append(i)
        for shape, idx in groups.items():
            pixels = shape[1] * shape[2]
            rows = [(i, s) for i in idx for s in range(mc_samples)]
            for start in range(0, len(rows), chunk):
                part = rows[start : start + chunk]
                x = torch.cat([items[i] for i, _ in part]).to(model.top_state)
                gens = [torch.Generator().manual_seed(_image_seed(seed, i, s)) for i, s in part]
                fwd = model.forward_train(x, lmb, gens)
                kl = fwd.kl_total.double().numpy()
                err = (fwd.reconstruction - x).pow(2).flatten(1).mean(dim=1).double().numpy()
                for k, (i, s) in enumerate(part):
                    rates[i, s] = kl[k] * LOG2E / pixels
                    mses[i, s] = err[k]
    finally:
        model.train(was_training)

    def mean_se(a: np.ndarray) -> tuple[float, float]:
        per_image = a.mean(axis=1)
        if per_image.size > 1:
            return float(per_image.mean()), float(per_image.std(ddof=1) / math.sqrt(per_image.size))
        if a.size > 1:
            return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))
        return float(a.mean()), None

    rate, rate_se = mean_se(rates)
    mse, mse_se = mean_se(mses)
    return RDPoint(
        lmb=float(lmb),
        rate_bpp=max(rate, 0.0),
        mse=mse,
        num_images=len(items),
        mc_samples=mc_samples,
        rate_se_bpp=rate_se,
        mse_se=mse_se,
    )


def sweep(
    model: HVAE,
    dataset,
    lambdas: Iterable[float],
    mc_samples: int = 8,
    seed: int = 0,
    label: str = "",
    metadata: dict | None = None,
) -> RDCurve:
    lambdas = [float(v) for v in lambdas]
    unique = sorted(set(lambdas))
    if len(unique) != len(lambdas):
        warnings.warn("duplicate lambda values in sweep were removed", stacklevel=2)
    for lmb in unique:
        _check_lambda(model, lmb)
    items = _as_items(dataset)
    points = [estimate_rd_point(model, items, lmb, mc_samples, seed) for lmb in unique]
    curve = RDCurve(points, label, dict(metadata or {}))
    for msg in curve.diagnostics():
        log.warning("%s: %s", label or "curve", msg)
    return curve


def log_lambdas(count: int, lo: float, hi: float) -> list[float]:
    if count == 1:
        return [math.sqrt(lo * hi)]
    return [float(v) for v in np.exp(np.linspace(math.log(lo), math.log(hi), count))]


# --------------------------------------------------------------------------
# BD-rate


def bd_rate(reference: RDCurve, test: RDCurve, samples: int = 1000) -> float:
    """Average rate difference (percent) of ``test`` against ``reference``.

    Fits log(rate) as a cubic in PSNR for each curve, integrates the
    difference over the common PSNR interval with the trapezoid rule, and
    returns (exp(mean difference) - 1) * 100. Negative means ``test``
    needs less rate for the same quality.
    """
    for name, c in (("reference", reference), ("test", test)):
        if len(c) < 4:
            raise ValueError(f"{name} curve has {len(c)} points; BD-rate needs at least 4")
        if np.any(c.rates <= 0):
            raise ValueError(f"{name} curve has non-positive rates; BD-rate works on log(rate)")
    ref_q, test_q = reference.psnrs, test.psnrs
    lo = max(ref_q.min(), test_q.min())
    hi = min(ref_q.max(), test_q.max())
    if hi - lo < 1.0:
        raise ValueError(
            f"PSNR ranges overlap by less than 1 dB: reference "
            f"[{ref_q.min():.3f}, {ref_q.max():.3f}] dB, test [{test_q.min():.3f}, {test_q.max():.3f}] dB"
        )
    fit_ref = np.polynomial.Polynomial.fit(ref_q, np.log(reference.rates), 3)
    fit_test = np.polynomial.Polynomial.fit(test_q, np.log(test.rates), 3)
    grid = np.linspace(lo, hi, samples)
    diff = fit_test(grid) - fit_ref(grid)
    avg = np.trapezoid(diff, grid) / (hi - lo)
    return float((math.exp(avg) - 1.0) * 100.0)


# --------------------------------------------------------------------------
# oracle comparison


@dataclass(frozen=True)
class BoundCheck:
    lmb: float
    rate_bpp: float
    oracle_bpp: float
    rate_se_bpp: float | None

    @property
    def gap(self) -> float:
        return self.rate_bpp - self.oracle_bpp

    @property
    def holds(self) -> bool:
        se = self.rate_se_bpp or 0.0
        return self.rate_bpp >= self.oracle_bpp - 2.0 * se


def gaussian_bound_check(curve: RDCurve, pixel_variance: float) -> list[BoundCheck]:
    """Compare every point with the Gaussian R(D) at its measured MSE.

    For the synthetic source the pixel-scale variance is used directly,
    so no rescaling is needed: R(D) is invariant under the affine map.
    """
    return [
        BoundCheck(p.lmb, p.rate_bpp, gaussian_rd(pixel_variance, p.mse) * LOG2E, p.rate_se_bpp)
        for p in curve.points
    ]


def gaussian_oracle_curve(variance: float, count: int, lo_ratio: float = 1e-3) -> RDCurve:
    """Analytic Gaussian R(D) on a log grid of D in [lo_ratio * var, var]."""
    ds = np.exp(np.linspace(math.log(lo_ratio * variance), math.log(variance), count))
    pts = [
        RDPoint(lmb=1.0 / (2.0 * d), rate_bpp=gaussian_rd(variance, d) * LOG2E, mse=float(d))
        for d in ds
    ]
    return RDCurve(pts, f"gaussian R(D), var={variance:g}", {"theoretical": "true", "source": "gaussian"})


def oracle_points_curve(points: Sequence[OraclePoint], label: str) -> RDCurve:
    """Blahut-Arimoto points as a curve; ``lambda`` holds -slope, ``mse`` the distortion."""
    pts = []
    for p in points:
        if p.distortion <= 0:
            log.warning("skipping zero-distortion oracle point at slope %g", p.slope)
            continue
        pts.append(RDPoint(lmb=-p.slope, rate_bpp=p.rate_nats * LOG2E, mse=p.distortion))
    return RDCurve(pts, label, {"theoretical": "true", "source": "blahut-arimoto"})


# --------------------------------------------------------------------------
# file format


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def format_curve(curve: RDCurve) -> str:
    buf = io.StringIO()
    meta = {"label": curve.label, **curve.metadata}
    for k, v in meta.items():
        buf.write(f"# {k}: {v}\n")
    with_se = any(p.rate_se_bpp is not None or p.mse_se is not None for p in curve.points)
    header = REQUIRED_HEADER + (OPTIONAL_COLUMNS if with_se else ())
    buf.write(",".join(header) + "\n")
    for p in curve.points:
        row = [p.lmb, p.rate_bpp, p.mse, p.psnr_db, p.num_images, p.mc_samples]
        if with_se:
            row += [p.rate_se_bpp, p.mse_se]
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def save_curve(curve: RDCurve, path: str | Path) -> None:
    Path(path).write_text(format_curve(curve), encoding="utf-8")


def parse_curve(text: str, source: str = "<string>") -> RDCurve:
    meta: dict[str, str] = {}
    header: list[str] | None = None
    points = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].partition(":")
            if sep:
                meta[key.strip()] = val.strip()
            continue
        cells = next(csv.reader([line]))
        if header is None:
            header = [c.strip() for c in cells]
            unknown = set(header) - set(REQUIRED_HEADER) - set(OPTIONAL_COLUMNS)
            if unknown:
                raise CurveFormatError(f"{source}:{lineno}: unknown columns {sorted(unknown)}")
            if "rate_bpp" not in header or not ({"mse", "psnr_db"} & set(header)):
                raise CurveFormatError(
                    f"{source}:{lineno}: header needs rate_bpp and one of mse/psnr_db, got {header}"
                )
            continue
        if len(cells) != len(header):
            raise CurveFormatError(
                f"{source}:{lineno}: expected {len(header)} fields, found {len(cells)}"
            )
        row = dict(zip(header, (c.strip() for c in cells)))
        try:
            vals = {
                k: float(v) for k, v in row.items() if k not in ("num_images", "mc_samples") and v != ""
            }
            ints = {k: int(row[k]) for k in ("num_images", "mc_samples") if k in row}
        except ValueError as e:
            raise CurveFormatError(f"{source}:{lineno}: {e}") from None
        if "rate_bpp" not in vals:
            raise CurveFormatError(f"{source}:{lineno}: missing rate_bpp")
        if vals["rate_bpp"] < 0:
            raise CurveFormatError(f"{source}:{lineno}: negative rate_bpp {vals['rate_bpp']}")
        if "mse" in vals:
            mse = vals["mse"]
        elif "psnr_db" in vals:
            mse = 10.0 ** (-vals["psnr_db"] / 10.0)
        else:
            raise CurveFormatError(f"{source}:{lineno}: row has neither mse nor psnr_db")
        if not mse > 0:
            raise CurveFormatError(f"{source}:{lineno}: mse must be positive, got {mse}")
        points.append(
            RDPoint(
                lmb=vals.get("lambda"),
                rate_bpp=vals["rate_bpp"],
                mse=mse,
                num_images=ints.get("num_images", 1),
                mc_samples=ints.get("mc_samples", 1),
                rate_se_bpp=vals.get("rate_se_bpp"),
                mse_se=vals.get("mse_se"),
            )
        )
    if header is None:
        raise CurveFormatError(f"{source}: no header line")
    label = meta.pop("label", "")
    return RDCurve(points, label, meta)


def load_curve(path: str | Path) -> RDCurve:
    return parse_curve(Path(path).read_text(encoding="utf-8"), str(path))


def with_metadata(curve: RDCurve, **meta) -> RDCurve:
    return replace(curve, metadata={**curve.metadata, **{k: str(v) for k, v in meta.items()}})

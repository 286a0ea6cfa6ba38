"""Command-line entry point.

    rdbound train  [--config FILE] [--out DIR] [--section.key VALUE ...]
    rdbound sweep  --checkpoint CKPT [--lambdas log:8:4:2048] [--out CSV]
    rdbound bdrate REF.csv TEST.csv
    rdbound oracle gaussian --var 1 --dgrid 32
    rdbound oracle ba --source bernoulli:0.5 --slopes 20
    rdbound plot A.csv [B.csv ...] [--out FIG] [--raster]

Every command finishes with one JSON line on stdout; errors go to stderr
with a nonzero exit status. Commands that write files also write a run
manifest (``manifest.json`` in the training directory, ``<output>.manifest.json``
otherwise). Default outputs go under ``$RDBOUND_OUTPUT`` (``runs`` if unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .checkpoint import file_sha256, load_checkpoint
from .data import heldout_set
from .evaluation import (
    CurveFormatError,
    bd_rate,
    gaussian_oracle_curve,
    load_curve,
    log_lambdas,
    oracle_points_curve,
    save_curve,
    sweep,
)
from .model import TrainingInstabilityError, build
from .oracles import DiscreteSourceSpec, ba_curve
from .plotting import plot_curves
from .training import train

log = logging.getLogger("rdbound")

EXIT_ERROR = 2


class SourceSpecError(ValueError):
    def __init__(self, text: str, position: int, message: str):
        super().__init__(f"malformed source spec {text!r} at position {position}: {message}")
        self.position = position


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _result(**fields) -> int:
    print(json.dumps(fields, sort_keys=True))
    return 0


def _write_manifest(path: Path, command: list[str], cfg: dict | None, seed, checkpoint_hash, started,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg or {},
        "seed": seed,
        "checkpoint_sha256": checkpoint_hash,
        "started": started,
        "finished": _now(),
        "version": __version__,
        # single-process sequential pipeline; set when a run is not bit-reproducible
        "nondeterminism": None,
    }
    manifest.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _side_manifest(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def parse_lambdas(spec: str) -> list[float]:
    """``log:COUNT:MIN:MAX`` or a comma-separated list."""
    spec = spec.strip()
    if spec.startswith("log:"):
        parts = spec.split(":")
        if len(parts) != 4:
            raise UsageError(f"--lambdas {spec!r}: expected log:COUNT:MIN:MAX")
        try:
            count, lo, hi = int(parts[1]), float(parts[2]), float(parts[3])
        except ValueError:
            raise UsageError(f"--lambdas {spec!r}: COUNT must be an integer, MIN/MAX numbers") from None
        if count < 1 or not 0 < lo <= hi:
            raise UsageError(f"--lambdas {spec!r}: need COUNT >= 1 and 0 < MIN <= MAX")
        return log_lambdas(count, lo, hi)
    try:
        vals = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lambdas {spec!r}: not a comma-separated list of numbers") from None
    if not vals:
        raise UsageError("--lambdas is empty")
    return vals


def parse_source(text: str) -> DiscreteSourceSpec:
    """``bernoulli:P``, ``uniform:K`` or ``pmf:P1,P2,...`` (Hamming distortion)."""
    kind, sep, rest = text.partition(":")
    if not sep:
        raise SourceSpecError(text, len(text), "expected ':' after the source kind")
    start = len(kind) + 1
    if kind not in ("bernoulli", "uniform", "pmf"):
        raise SourceSpecError(text, 0, f"unknown kind {kind!r} (bernoulli, uniform, pmf)")
    if not rest:
        raise SourceSpecError(text, start, "missing parameter")
    if kind == "uniform":
        try:
            k = int(rest)
        except ValueError:
            raise SourceSpecError(text, start, f"expected an integer alphabet size, got {rest!r}") from None
        if k < 2:
            raise SourceSpecError(text, start, "alphabet size must be >= 2")
        return DiscreteSourceSpec.hamming(np.full(k, 1.0 / k))
    values = []
    pos = start
    for tok in rest.split(","):
        try:
            values.append(float(tok))
        except ValueError:
            raise SourceSpecError(text, pos, f"expected a number, got {tok!r}") from None
        pos += len(tok) + 1
    if kind == "bernoulli":
        if len(values) != 1:
            raise SourceSpecError(text, start, "bernoulli takes exactly one probability")
        if not 0 < values[0] < 1:
            raise SourceSpecError(text, start, f"probability must lie in (0, 1), got {values[0]}")
        return DiscreteSourceSpec.bernoulli(values[0])
    try:
        return DiscreteSourceSpec.hamming(np.asarray(values))
    except ValueError as e:
        raise SourceSpecError(text, start, str(e)) from None


def default_slopes(count: int) -> list[float]:
    return [-float(v) for v in np.logspace(math.log10(0.05), math.log10(20.0), count)]


# --------------------------------------------------------------------------
# commands


def cmd_train(args, overrides: dict[str, str]) -> int:
    started = _now()
    cfg = C.resolve(args.config, overrides)
    mcfg = C.model_config(cfg)
    source = C.source_spec(cfg)
    tcfg = C.train_config(cfg, mcfg)
    out = Path(args.out) if args.out else C.output_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    metrics_path = out / "metrics.csv"

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        model = resume.model
        if model.config != mcfg:
            raise UsageError("--resume checkpoint was trained with a different model configuration")
    else:
        model = build(mcfg, seed=cfg["model.seed"])
        metrics_path.write_text("")

    meta = _flat_text(cfg)
    t0 = time.perf_counter()
    result = train(model, source, tcfg, log_path=metrics_path, checkpoint_path=ckpt_path,
                   resume=resume, metadata=meta)
    digest = file_sha256(ckpt_path)
    extra = None
    if resume is not None:
        extra = {"resumed_from": str(args.resume), "resumed_at_step": resume.step,
                 "nondeterminism": "resumed run: data and noise streams restart at the resume step, "
                                   "so the result differs from an uninterrupted run"}
    _write_manifest(out / "manifest.json", args.argv, cfg, cfg["train.seed"], digest, started, extra)
    last = result.history[-1] if result.history else None
    return _result(
        command="train",
        checkpoint=str(ckpt_path),
        checkpoint_sha256=digest,
        metrics=str(metrics_path),
        manifest=str(out / "manifest.json"),
        steps=result.step,
        final_loss=last.loss if last else None,
        seconds=round(time.perf_counter() - t0, 3),
    )


def _flat_text(cfg: dict) -> dict[str, str]:
    out = {}
    for k, v in cfg.items():
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out[k] = str(v)
    return out


def cmd_sweep(args, overrides: dict[str, str]) -> int:
    started = _now()
    ckpt = load_checkpoint(args.checkpoint)
    stored = {k: v for k, v in ckpt.metadata.items() if k in C.SCHEMA}
    cfg = C.defaults()
    cfg.update({k: C.parse_value(k, v) for k, v in stored.items()})
    for k, v in overrides.items():
        if not k.startswith(("data.", "eval.")):
            raise C.ConfigError(k, "sweep only accepts data.* and eval.* overrides")
        cfg[k] = C.parse_value(k, v)
    if args.mc_samples is not None:
        cfg["eval.mc_samples"] = args.mc_samples
    if args.num_images is not None:
        cfg["eval.num_images"] = args.num_images
    if args.seed is not None:
        cfg["eval.seed"] = args.seed
    source = C.source_spec(cfg)
    lambdas = parse_lambdas(args.lambdas)
    model = ckpt.model
    sched = model.config.schedule
    bad = [v for v in lambdas if not sched.contains(v)]
    if bad:
        raise UsageError(
            f"lambda values {bad} are outside the trained range "
            f"[{sched.lambda_min:g}, {sched.lambda_max:g}]; the model cannot extrapolate"
        )

    dataset = heldout_set(source, cfg["eval.num_images"], model.config.coarsest_downsample, cfg["eval.seed"])
    digest = file_sha256(args.checkpoint)
    curve = sweep(
        model, dataset, lambdas,
        mc_samples=cfg["eval.mc_samples"], seed=cfg["eval.seed"],
        label=args.label or Path(args.checkpoint).parent.name or "model",
        metadata={"theoretical": "false", "checkpoint_sha256": digest, "source": source.kind},
    )
    out = Path(args.out) if args.out else C.output_root() / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_curve(curve, out)
    _write_manifest(_side_manifest(out), args.argv, cfg, cfg["eval.seed"], digest, started)
    return _result(command="sweep", curve=str(out), points=len(curve), sha256=file_sha256(out))


def cmd_bdrate(args, overrides) -> int:
    if overrides:
        raise UsageError(f"unexpected arguments: {sorted(overrides)}")
    ref = load_curve(args.reference)
    test = load_curve(args.test)
    value = bd_rate(ref, test)
    print(f"BD-rate of {args.test} vs {args.reference}: {value:+.4f}%")
    return _result(command="bdrate", reference=str(args.reference), test=str(args.test), bd_rate_percent=value)


def cmd_oracle(args, overrides) -> int:
    if overrides:
        raise UsageError(f"unexpected arguments: {sorted(overrides)}")
    started = _now()
    if args.kind == "gaussian":
        if not args.var > 0:
            raise UsageError(f"--var must be positive, got {args.var}")
        if args.dgrid < 1:
            raise UsageError("--dgrid must be >= 1")
        curve = gaussian_oracle_curve(args.var, args.dgrid)
        params = {"var": args.var, "dgrid": args.dgrid}
    else:
        src = parse_source(args.source)
        if args.slopes is None:
            slopes = default_slopes(20)
        elif "," in args.slopes:
            try:
                slopes = [float(v) for v in args.slopes.split(",")]
            except ValueError:
                raise UsageError(f"--slopes {args.slopes!r}: not a list of numbers") from None
        else:
            try:
                slopes = default_slopes(int(args.slopes))
            except ValueError:
                raise UsageError(f"--slopes {args.slopes!r}: give a count or a comma-separated list") from None
        if any(not s < 0 for s in slopes):
            raise UsageError("slopes must be negative (s < 0)")
        points = ba_curve(src, slopes, tol=args.tol, max_iter=args.max_iter)
        curve = oracle_points_curve(points, f"Blahut-Arimoto {args.source}")
        params = {"source": args.source, "slopes": len(slopes)}
    out = Path(args.out) if args.out else C.output_root() / f"oracle-{args.kind}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_curve(curve, out)
    _write_manifest(_side_manifest(out), args.argv, None, None, None, started, {"oracle": params})
    return _result(command="oracle", kind=args.kind, curve=str(out), points=len(curve))


def cmd_plot(args, overrides) -> int:
    if overrides:
        raise UsageError(f"unexpected arguments: {sorted(overrides)}")
    if not args.curves:
        raise UsageError("plot needs at least one curve file")
    started = _now()
    curves = [load_curve(p) for p in args.curves]
    for c, p in zip(curves, args.curves):
        if not c.label:
            c.label = Path(p).stem
    suffix = ".png" if args.raster else ".svg"
    out = Path(args.out) if args.out else C.output_root() / f"rd{suffix}"
    if args.out is None or out.suffix == "":
        out = out.with_suffix(suffix)
    out.parent.mkdir(parents=True, exist_ok=True)

    styles = plot_curves(curves, out, title=args.title)
    _write_manifest(_side_manifest(out), args.argv, None, None, None, started,
                    {"inputs": [str(p) for p in args.curves]})
    return _result(command="plot", figure=str(out), series=len(curves), linestyles=styles)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdbound", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variable-rate model",
                       epilog="Any config key can be overridden as --section.key VALUE.")
    p.add_argument("--config", help="key = value file, or a previous run's manifest.json")
    p.add_argument("--out", help="run directory (default $RDBOUND_OUTPUT/train)")
    p.add_argument("--resume", help="continue from this checkpoint; appends to the metrics log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="estimate (rate, distortion) over a lambda grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambdas", default="log:8:4:2048", help="log:COUNT:MIN:MAX or a comma list")
    p.add_argument("--out", help="curve CSV (default $RDBOUND_OUTPUT/sweep.csv)")
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--num-images", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--label")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bdrate", help="BD-rate of TEST against REFERENCE (percent)")
    p.add_argument("reference")
    p.add_argument("test")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("oracle", help="exact R(D) curves")
    p.add_argument("kind", choices=["gaussian", "ba"])
    p.add_argument("--var", type=float, default=1.0, help="gaussian: source variance")
    p.add_argument("--dgrid", type=int, default=32, help="gaussian: number of distortion points")
    p.add_argument("--source", default="bernoulli:0.5", help="ba: bernoulli:P | uniform:K | pmf:P1,P2,...")
    p.add_argument("--slopes", help="ba: point count, or comma list of negative slopes")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plot", help="PSNR vs bpp overlay")
    p.add_argument("curves", nargs="*")
    p.add_argument("--out", help="figure path (default $RDBOUND_OUTPUT/rd.svg)")
    p.add_argument("--raster", action="store_true", help="write PNG instead of SVG")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = C.parse_overrides(extra)
        return args.func(args, overrides)
    except C.ConfigError as e:
        print(f"error: config key {e}", file=sys.stderr)
    except (UsageError, CurveFormatError, SourceSpecError, TrainingInstabilityError) as e:
        print(f"error: {e}", file=sys.stderr)
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

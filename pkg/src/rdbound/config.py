"""Run configuration as flat dotted keys.

Precedence: built-in defaults < config file < command-line overrides.
A config file has one ``key = value`` per line; ``#`` starts a comment.
A run manifest (JSON with a ``config`` object) is accepted as a config
file too, which is how a run is repeated.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

from .data import SourceSpec
from .model import PRESETS, ModelConfig, parse_stages
from .rd_math import LambdaSchedule
from .training import TrainConfig

OUTPUT_ENV = "RDBOUND_OUTPUT"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(v: str) -> bool:
    low = str(v).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {v!r}")


def _opt_float(v: str) -> float | None:
    return None if str(v).strip().lower() in ("none", "off", "") else float(v)


def _opt_int(v: str) -> int | None:
    return None if str(v).strip().lower() in ("none", "") else int(v)


def _opt_str(v: str) -> str | None:
    v = str(v).strip()
    return None if v.lower() in ("", "none") else v


# key -> (parser, default). ``None`` model defaults mean "take it from the preset".
SCHEMA: dict[str, tuple[Any, Any]] = {
    "model.preset": (str, "desk"),
    "model.C": (_opt_int, None),
    "model.stages": (_opt_str, None),
    "model.latent_channels": (_opt_int, None),
    "model.embed_dim": (_opt_int, None),
    "model.enc_blocks": (_opt_int, None),
    "model.seed": (int, 0),
    "train.steps": (int, 200_000),
    "train.batch_size": (int, 32),
    "train.lr": (float, 2e-4),
    "train.lambda_min": (float, 4.0),
    "train.lambda_max": (float, 2048.0),
    "train.seed": (int, 0),
    "train.smoothing": (_bool, True),
    "train.clip_norm": (_opt_float, 2.0),
    "train.patch_size": (_opt_int, None),
    "train.checkpoint_every": (int, 1000),
    "data.kind": (str, "image_directory"),
    "data.path": (_opt_str, None),
    "data.dim": (int, 16),
    "data.variance": (float, 1.0),
    "eval.mc_samples": (int, 8),
    "eval.num_images": (int, 512),
    "eval.seed": (int, 1),
}


def defaults() -> dict[str, Any]:
    return {k: d for k, (_, d) in SCHEMA.items()}


def parse_value(key: str, raw: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(key, "unknown configuration key")
    parser, _ = SCHEMA[key]
    if raw is None or not isinstance(raw, str):
        return raw
    try:
        return parser(raw)
    except ValueError as e:
        raise ConfigError(key, str(e)) from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file {str(path)!r} does not exist")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        data = json.loads(text)
        items = data.get("config", data)
        return {k: parse_value(k, v) for k, v in items.items()}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}", f"expected 'key = value', got {raw!r}")
        out[key.strip()] = parse_value(key.strip(), val.strip())
    return out


def resolve(config_path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> dict[str, Any]:
    cfg = defaults()
    if config_path:
        cfg.update(read_config_file(config_path))
    for k, v in (overrides or {}).items():
        cfg[k] = parse_value(k, v)
    return cfg


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``["--train.steps", "10", "--data.kind=x"]`` -> {"train.steps": "10", "data.kind": "x"}."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(tok, "unrecognized argument (overrides look like --section.key value)")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(key, "missing value")
            val = tokens[i + 1]
            i += 2
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        out[key] = val
    return out


# --------------------------------------------------------------------------
# typed views


def model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    preset = cfg["model.preset"]
    if preset not in PRESETS:
        raise ConfigError("model.preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    kw: dict[str, Any] = {
        "lambda_min": cfg["train.lambda_min"],
        "lambda_max": cfg["train.lambda_max"],
        "smoothing": cfg["train.smoothing"],
    }
    if cfg["model.C"] is not None:
        kw["base_channels"] = cfg["model.C"]
    for key, field_name in (
        ("model.latent_channels", "latent_channels"),
        ("model.embed_dim", "embed_dim"),
        ("model.enc_blocks", "enc_blocks"),
    ):
        if cfg[key] is not None:
            kw[field_name] = cfg[key]
    if cfg["model.stages"]:
        try:
            kw["stages"] = parse_stages(cfg["model.stages"])
        except ValueError as e:
            raise ConfigError("model.stages", str(e)) from None
        kw["patch_size"] = kw["stages"][0].downsample
    try:
        return PRESETS[preset](**kw)
    except ValueError as e:
        raise ConfigError("model", str(e)) from None


def source_spec(cfg: Mapping[str, Any]) -> SourceSpec:
    kind = cfg["data.kind"]
    if kind not in ("image_directory", "synthetic_gaussian"):
        raise ConfigError("data.kind", f"unknown source kind {kind!r}")
    if kind == "image_directory" and not cfg["data.path"]:
        raise ConfigError("data.path", "required when data.kind = image_directory")
    try:
        return SourceSpec(kind, cfg["data.path"], cfg["data.dim"], cfg["data.variance"])
    except ValueError as e:
        raise ConfigError("data", str(e)) from None


def train_config(cfg: Mapping[str, Any], model: ModelConfig) -> TrainConfig:
    patch = cfg["train.patch_size"] or model.patch_size
    try:
        return TrainConfig(
            steps=cfg["train.steps"],
            batch_size=cfg["train.batch_size"],
            learning_rate=cfg["train.lr"],
            lambda_schedule=LambdaSchedule(cfg["train.lambda_min"], cfg["train.lambda_max"]),
            patch_size=patch,
            seed=cfg["train.seed"],
            smoothing_enabled=cfg["train.smoothing"],
            clip_norm=cfg["train.clip_norm"],
            checkpoint_every=cfg["train.checkpoint_every"],
        )
    except ValueError as e:
        raise ConfigError("train", str(e)) from None


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def to_text(cfg: Mapping[str, Any]) -> str:
    lines = []
    for k, v in cfg.items():
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"

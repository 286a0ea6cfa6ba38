"""Checkpoint archive.

A checkpoint is a zip file with three members:

``config.txt``
    The :class:`~rdbound.model.ModelConfig` as ``key = value`` lines.
    Unknown keys are ignored and missing keys take their defaults.
``params.bin`` / ``optimizer.bin``
    Named float arrays. Layout (all integers little-endian uint32)::

        b"RDBA" | version | count
        count x ( name_len | name (utf-8) | ndim | dim_0 .. dim_{ndim-1}
                  | prod(dims) float32 little-endian values )

    ``optimizer.bin`` holds Adam moments named ``exp_avg/<param>`` and
    ``exp_avg_sq/<param>``.
``state.txt``
    ``key = value`` training metadata: ``step``, ``optimizer.step``, and
    the resolved run configuration (dotted keys).

Members are written in a fixed order with a fixed timestamp, so equal
inputs give byte-identical archives.
"""

from __future__ import annotations

import hashlib
import io
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .model import HVAE, ModelConfig, build

MAGIC = b"RDBA"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def read_arrays(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError("not a parameter block (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version > VERSION:
        raise ValueError(f"parameter block version {version} is newer than supported {VERSION}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out


def _kv_text(d: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


@dataclass
class Checkpoint:
    model: HVAE
    step: int = 0
    metadata: dict[str, str] = field(default_factory=dict)
    optimizer_moments: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0

    def optimizer_state_dict(self, optimizer: torch.optim.Adam) -> dict:
        """Rebuild an Adam state dict for ``optimizer`` from the stored moments."""
        sd = optimizer.state_dict()
        names = [n for n, _ in self.model.named_parameters()]
        state = {}
        for i, name in enumerate(names):
            if f"exp_avg/{name}" not in self.optimizer_moments:
                continue
            state[i] = {
                "step": torch.tensor(float(self.optimizer_step)),
                "exp_avg": torch.from_numpy(self.optimizer_moments[f"exp_avg/{name}"]),
                "exp_avg_sq": torch.from_numpy(self.optimizer_moments[f"exp_avg_sq/{name}"]),
            }
        sd["state"] = state
        return sd


def save_checkpoint(
    path: str | Path,
    model: HVAE,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    metadata: Mapping[str, object] | None = None,
) -> str:
    """Write the archive; returns its sha256."""
    params = {n: p.detach().cpu().numpy() for n, p in model.named_parameters()}
    moments: dict[str, np.ndarray] = {}
    opt_step = 0
    if optimizer is not None:
        by_param = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = by_param[id(p)]
                moments[f"exp_avg/{name}"] = st["exp_avg"].cpu().numpy()
                moments[f"exp_avg_sq/{name}"] = st["exp_avg_sq"].cpu().numpy()
                opt_step = int(st["step"])
    state = {"step": step, "optimizer.step": opt_step}
    state.update(metadata or {})

    members = [
        ("config.txt", model.config.to_text().encode()),
        ("params.bin", write_arrays(params)),
        ("optimizer.bin", write_arrays(moments)),
        ("state.txt", _kv_text(state).encode()),
    ]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in members:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    blob = buf.getvalue()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_text(zf.read("config.txt").decode())
        params = read_arrays(zf.read("params.bin"))
        names = set(zf.namelist())
        moments = read_arrays(zf.read("optimizer.bin")) if "optimizer.bin" in names else {}
        state = _parse_kv(zf.read("state.txt").decode()) if "state.txt" in names else {}
    model = build(config)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for name, p in expected.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{name}: shape {arr.shape} != model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    step = int(state.pop("step", 0))
    opt_step = int(state.pop("optimizer.step", 0))
    return Checkpoint(model, step, state, moments, opt_step)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

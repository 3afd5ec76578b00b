"""Binary checkpoint container.

Layout, all integers and reals little-endian::

    magic      8 bytes  b"ASTCAPS\\0"
    version    u32
    config     u32 length + UTF-8 JSON (sorted keys, compact)
    n_params   u32
    per parameter:
        name   u16 length + UTF-8
        ndim   u8, then ndim x u32 dims
        data   f64 x prod(dims), row-major
    has_bayes  u8
    if set:    u32 n_classes, u32 n_heads, f64 alpha,
               f64 prior[n_classes], f64 conditionals[n_heads, n_classes, n_classes]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .decision import BayesModel
from .model import ASTCapsNet, ModelConfig
from .tensor import Rng

MAGIC = b"ASTCAPS\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_bytes(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(model: ASTCapsNet, run_config: dict | None = None) -> bytes:
    config = dict(run_config or {})
    config["model"] = model.config.to_dict()
    out = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_bytes(config)
    out += [struct.pack("<I", len(cfg)), cfg]
    params = model.parameters()
    out.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<B", p.data.ndim)]
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    if model.bayes is None:
        out.append(struct.pack("<B", 0))
    else:
        b = model.bayes
        heads, n, _ = b.conditionals.shape
        out += [struct.pack("<BIId", 1, n, heads, b.alpha),
                np.ascontiguousarray(b.prior, dtype="<f8").tobytes(),
                np.ascontiguousarray(b.conditionals, dtype="<f8").tobytes()]
    return b"".join(out)


def save(model: ASTCapsNet, path: str | Path, run_config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model, run_config))
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def loads(raw: bytes, config: ModelConfig | None = None) -> tuple[ASTCapsNet, dict]:
    """Rebuild a model. With ``config`` given, blobs are checked against it
    instead of the echoed configuration."""
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (cfg_len,) = r.unpack("I", "config length")
    try:
        run_config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
        model_cfg = config or ModelConfig(**run_config["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    model = ASTCapsNet(model_cfg, Rng(0))
    params = model.parameters()
    (n_params,) = r.unpack("I", "parameter count")
    seen = []
    for _ in range(n_params):
        (name_len,) = r.unpack("H", "parameter name")
        name = r.take(name_len, "parameter name").decode("utf-8")
        (ndim,) = r.unpack("B", f"{name} rank")
        shape = r.unpack(f"{ndim}I", f"{name} shape")
        data = r.floats(int(np.prod(shape)), f"{name} data").reshape(shape)
        if name not in params:
            raise CheckpointError(f"parameter {name!r} is not part of the configured model")
        if tuple(shape) != params[name].shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(shape)} but the config expects {params[name].shape}")
        params[name].data[...] = data
        seen.append(name)
    missing = sorted(set(params) - set(seen))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing)}")
    (has_bayes,) = r.unpack("B", "bayes flag")
    if has_bayes:
        n, heads, alpha = r.unpack("IId", "bayes header")
        prior = r.floats(n, "bayes prior")
        cond = r.floats(heads * n * n, "bayes tables").reshape(heads, n, n)
        model.bayes = BayesModel(prior, cond, alpha)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after checkpoint")
    return model, run_config


def load(path: str | Path, config: ModelConfig | None = None) -> tuple[ASTCapsNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), config)

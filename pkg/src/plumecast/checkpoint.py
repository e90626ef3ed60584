"""Checkpoint directories: ``manifest.json`` plus one little-endian ``params.bin``."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .features import NormStats
from .model import ModelConfig, UNetForecaster

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT_VERSION = 1


class CheckpointIntegrityError(IOError):
    """The blob does not match the manifest (size or checksum)."""


class FingerprintMismatchError(ValueError):
    """The checkpoint was written for a different model configuration."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: Dict[str, np.ndarray]          # "param/..", "bn/..", "output_scale", "norm/.."
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return self.model_config.fingerprint()

    @property
    def norm_stats(self) -> NormStats:
        return NormStats.from_arrays(self.arrays)

    @classmethod
    def from_model(cls, model: UNetForecaster, norm: NormStats, step=0, extra=None):
        arrays = {k: np.array(v, copy=True) for k, v in model.state_arrays().items()}
        arrays.update({k: np.array(v, copy=True) for k, v in norm.arrays().items()})
        return cls(model.cfg, arrays, step, dict(extra or {}))

    def build_model(self) -> UNetForecaster:
        dtype = np.asarray(self.arrays["output_scale"]).dtype
        model = UNetForecaster(self.model_config, seed=0, dtype=np.dtype(dtype.newbyteorder("=")))
        model.set_state_arrays(self.arrays)
        return model


def _le(dtype) -> str:
    dt = np.dtype(dtype)
    if dt.kind != "f" or dt.itemsize not in (4, 8):
        raise TypeError(f"checkpoint arrays must be float32 or float64, got {dt}")
    return "<f4" if dt.itemsize == 4 else "<f8"


def save_checkpoint(ckpt: Checkpoint, path):
    """Write ``path/manifest.json`` and ``path/params.bin`` (fixed little-endian layout)."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    sha = hashlib.sha256()
    tmp = os.path.join(path, BLOB + ".tmp")
    with open(tmp, "wb") as f:
        for name in sorted(ckpt.arrays):
            a = np.asarray(ckpt.arrays[name])
            dt = _le(a.dtype)
            raw = np.ascontiguousarray(a, dtype=dt).tobytes()
            f.write(raw)
            sha.update(raw)
            entries.append({"name": name, "shape": list(a.shape), "dtype": dt, "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    os.replace(tmp, os.path.join(path, BLOB))
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_fingerprint": ckpt.fingerprint,
        "model_config": ckpt.model_config.to_dict(),
        "step": int(ckpt.step),
        "blob": BLOB,
        "blob_bytes": offset,
        "blob_sha256": sha.hexdigest(),
        "arrays": entries,
        "extra": ckpt.extra,
    }
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path, expected_config: ModelConfig = None) -> Checkpoint:
    """Read a checkpoint; verifies blob size, checksum and (optionally) the config fingerprint."""
    mpath = os.path.join(path, MANIFEST)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}") from None
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if cfg.fingerprint() != manifest["config_fingerprint"]:
        raise FingerprintMismatchError(f"{mpath}: stored fingerprint does not match its model_config")
    if expected_config is not None and expected_config.fingerprint() != manifest["config_fingerprint"]:
        raise FingerprintMismatchError(
            f"checkpoint fingerprint {manifest['config_fingerprint'][:12]} does not match the "
            f"configured model {expected_config.fingerprint()[:12]}")
    bpath = os.path.join(path, manifest["blob"])
    size = os.path.getsize(bpath) if os.path.exists(bpath) else -1
    if size != manifest["blob_bytes"]:
        raise CheckpointIntegrityError(f"{bpath}: {size} bytes, manifest says {manifest['blob_bytes']}")
    with open(bpath, "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointIntegrityError(f"{bpath}: checksum mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        a = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(a.dtype.newbyteorder("="))
    return Checkpoint(cfg, arrays, int(manifest["step"]), manifest.get("extra", {}))

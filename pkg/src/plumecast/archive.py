"""On-disk patch archives: a JSON manifest plus one little-endian float32 blob per array."""
from __future__ import annotations

import json
import os
from typing import Dict, List, Sequence

import numpy as np

from .data import POLLUTANTS, format_hour, parse_hours
from .features import (
    HI_CONST_CHANNELS,
    HI_HIST_CHANNELS,
    LO_FCST_CHANNELS,
    LO_HIST_CHANNELS,
    Patch,
    PatchConfig,
)
from .geo import GeoPoint

MANIFEST = "manifest.json"
DTYPE = "<f4"
FORMAT_VERSION = 1


class ArchiveIntegrityError(IOError):
    """Blob sizes disagree with the manifest."""


def target_key(res) -> str:
    return f"target_{int(round(res))}m"


def array_shapes(cfg: PatchConfig) -> Dict[str, tuple]:
    n, m = cfg.hi_size, cfg.lo_size
    shapes = {
        "hi_hist": (cfg.n_in, n, n, len(HI_HIST_CHANNELS)),
        "hi_const": (n, n, len(HI_CONST_CHANNELS)),
        "lo_hist": (cfg.n_in, m, m, len(LO_HIST_CHANNELS)),
        "lo_fcst": (cfg.n_out, m, m, len(LO_FCST_CHANNELS)),
    }
    for res, size in cfg.target_sizes().items():
        shapes[target_key(res)] = (cfg.n_out, size, size, len(POLLUTANTS))
    shapes["center_obs"] = (cfg.n_out, len(POLLUTANTS))
    shapes["bench"] = (len(POLLUTANTS),)
    return shapes


def patch_arrays(patch: Patch) -> Dict[str, np.ndarray]:
    out = {"hi_hist": patch.hi_hist, "hi_const": patch.hi_const, "lo_hist": patch.lo_hist,
           "lo_fcst": patch.lo_fcst, "center_obs": patch.center_obs, "bench": patch.bench}
    for res, t in patch.targets.items():
        out[target_key(res)] = t
    return out


class PatchArchiveWriter:
    """Streams patches of one split to ``directory``; call :meth:`close` to write the manifest."""

    def __init__(self, directory, cfg: PatchConfig, extra: dict = None):
        self.directory = directory
        self.cfg = cfg
        self.extra = extra or {}
        self.shapes = array_shapes(cfg)
        os.makedirs(directory, exist_ok=True)
        self._files = {k: open(os.path.join(directory, f"{k}.f32"), "wb") for k in self.shapes}
        self.records: List[dict] = []

    def append(self, patch: Patch, city: str = ""):
        arrays = patch_arrays(patch)
        for k, shape in self.shapes.items():
            a = np.asarray(arrays[k])
            if a.shape != shape:
                raise ValueError(f"patch array {k} has shape {a.shape}, expected {shape}")
            self._files[k].write(np.ascontiguousarray(a, dtype=DTYPE).tobytes())
        self.records.append({"station_id": patch.center_station_id, "t0": format_hour(patch.t0),
                             "lat": patch.center.lat, "lon": patch.center.lon, "city": city})

    def close(self):
        for f in self._files.values():
            f.close()
        manifest = {
            "format_version": FORMAT_VERSION,
            "count": len(self.records),
            "dtype": DTYPE,
            "config_fingerprint": self.cfg.fingerprint(),
            "patch_config": _cfg_dict(self.cfg),
            "arrays": {k: {"file": f"{k}.f32", "shape": list(s)} for k, s in self.shapes.items()},
            "channels": {"hi_hist": list(HI_HIST_CHANNELS), "hi_const": list(HI_CONST_CHANNELS),
                         "lo_hist": list(LO_HIST_CHANNELS), "lo_fcst": list(LO_FCST_CHANNELS),
                         "targets": list(POLLUTANTS)},
            "patches": self.records,
            **self.extra,
        }
        with open(os.path.join(self.directory, MANIFEST), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
        return manifest


def _cfg_dict(cfg: PatchConfig):
    import dataclasses
    return dataclasses.asdict(cfg)


class PatchArchive:
    """Read-only view of a patch archive; arrays are memory-mapped."""

    def __init__(self, directory):
        self.directory = directory
        path = os.path.join(directory, MANIFEST)
        try:
            with open(path) as f:
                self.manifest = json.load(f)
        except FileNotFoundError:
            raise FileNotFoundError(f"no patch archive manifest at {path}") from None
        self.count = int(self.manifest["count"])
        self.records = self.manifest["patches"]
        self.shapes = {k: tuple(v["shape"]) for k, v in self.manifest["arrays"].items()}
        self._arrays = {}
        for k, spec in self.manifest["arrays"].items():
            fpath = os.path.join(directory, spec["file"])
            per = int(np.prod(spec["shape"])) * 4
            size = os.path.getsize(fpath) if os.path.exists(fpath) else -1
            if size != per * self.count:
                raise ArchiveIntegrityError(
                    f"{fpath}: {size} bytes, manifest implies {per * self.count}")
            if self.count:
                self._arrays[k] = np.memmap(fpath, dtype=DTYPE, mode="r",
                                            shape=(self.count,) + tuple(spec["shape"]))
            else:
                self._arrays[k] = np.zeros((0,) + tuple(spec["shape"]), dtype=DTYPE)

    def __len__(self):
        return self.count

    @property
    def target_keys(self) -> List[str]:
        return sorted((k for k in self.shapes if k.startswith("target_")),
                      key=lambda k: int(k[len("target_"):-1]))

    def array(self, name) -> np.ndarray:
        return self._arrays[name]

    def batch(self, indices: Sequence[int]) -> Dict[str, np.ndarray]:
        """Copies of the arrays for ``indices`` as native float32, stacked on axis 0."""
        idx = np.asarray(indices, dtype=np.int64)
        return {k: np.asarray(a[idx], dtype=np.float32) for k, a in self._arrays.items()}

    def t0(self, i) -> int:
        return int(parse_hours([self.records[i]["t0"]])[0])

    def center(self, i) -> GeoPoint:
        r = self.records[i]
        return GeoPoint(r["lat"], r["lon"])

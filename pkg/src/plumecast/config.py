"""Run configuration: one YAML file with sections for every component, plus ``--set`` overrides."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .features import PatchConfig, TargetConfig
from .model import ModelConfig
from .synth import SynthConfig, SynthParameterError
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file or override."""


@dataclass
class SamplingConfig:
    """Which (station, t0) pairs become patches."""

    stride_h: int = 6
    eval_stride_h: int = 6
    max_train_patches: Optional[int] = None
    max_val_patches: Optional[int] = None
    max_eval_patches: Optional[int] = None
    seed: int = 0


@dataclass
class PathsConfig:
    dataset: str = "data"
    patches: str = "patches"
    run: str = "run"
    eval: str = "eval"
    forecast: str = "forecast"


# patch-shape fields shared by PatchConfig and ModelConfig
SHARED_SHAPE = ("n_in", "n_out", "hi_size", "hi_resolution_m", "lo_size", "lo_resolution_m")
PATCH_ONLY = ("hi_sigma_m", "lo_sigma_m")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    patch: dict = field(default_factory=lambda: {k: getattr(PatchConfig(), k) for k in PATCH_ONLY})
    target: TargetConfig = field(default_factory=TargetConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def patch_config(self) -> PatchConfig:
        """Patch geometry; shapes come from the model section so the two cannot disagree."""
        return PatchConfig(**{k: getattr(self.model, k) for k in SHARED_SHAPE}, **self.patch,
                           target=self.target)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "patch": dict(self.patch),
            "target": dataclasses.asdict(self.target),
            "sampling": dataclasses.asdict(self.sampling),
            "train": dataclasses.asdict(self.train),
            "paths": dataclasses.asdict(self.paths),
        }

    def dump(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = sorted(set(d) - SECTIONS.keys())
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        base = RunConfig().to_dict()
        for name, values in d.items():
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            bad = sorted(set(values) - set(base[name]))
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(f'{name}.{k}' for k in bad)}")
            for k, v in values.items():
                base[name][k] = _coerce(f"{name}.{k}", base[name][k], v)
        try:
            cfg = cls(
                synth=SynthConfig.from_dict(base["synth"]),
                model=ModelConfig.from_dict(base["model"]),
                patch=base["patch"],
                target=TargetConfig(**base["target"]),
                sampling=SamplingConfig(**base["sampling"]),
                train=TrainConfig(**base["train"]),
                paths=PathsConfig(**base["paths"]),
            )
            cfg.synth.validate()
        except (TypeError, ValueError, SynthParameterError) as e:
            raise ConfigError(str(e)) from None
        cfg.check()
        return cfg

    def check(self):
        if self.synth.n_out < self.model.n_out:
            raise ConfigError(f"synth.n_out ({self.synth.n_out}) must cover model.n_out ({self.model.n_out})")
        t = self.train
        if t.batch_size < 1 or t.epochs < 1 or t.micro_batch < 1 or not t.lr > 0:
            raise ConfigError("train.batch_size, train.epochs and train.micro_batch must be >= 1 "
                              "and train.lr > 0")
        if not 0 < t.eval_fraction < 1 or not 0 <= t.validation_fraction < 1:
            raise ConfigError("train.eval_fraction must be in (0, 1) and validation_fraction in [0, 1)")
        s = self.sampling
        if s.stride_h < 1 or s.eval_stride_h < 1:
            raise ConfigError("sampling strides must be >= 1 hour")


SECTIONS = {k: None for k in ("synth", "model", "patch", "target", "sampling", "train", "paths")}

# Small settings that finish in minutes; the "acceptance" profile is the end-to-end learning check.
PROFILES = {
    "default": {},
    "smoke": {
        "synth": {"days": 3, "spin_up_hours": 12, "domain_km": 120, "outer_resolution_m": 2000,
                  "city_spread_km": 20, "min_city_separation_km": 10, "n_cities": 2, "n_stations": 8,
                  "n_road_segments": 120},
        "sampling": {"stride_h": 24, "eval_stride_h": 24, "max_train_patches": 8, "max_val_patches": 2,
                     "max_eval_patches": 4},
        "train": {"batch_size": 4, "epochs": 1},
    },
    "acceptance": {
        "synth": {"n_stations": 50, "days": 60},
        "sampling": {"stride_h": 6, "eval_stride_h": 24, "max_train_patches": 600, "max_val_patches": 48},
        "train": {"epochs": 6},
    },
}


def _coerce(key, default, value):
    """Numbers written as strings (YAML reads ``1e-3`` as text) take the default's type."""
    if isinstance(value, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            return float(value) if isinstance(default, float) else int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if default is None and isinstance(value, str):
        for kind in (int, float):
            try:
                return kind(value)
            except ValueError:
                pass
    return value


def _merge(base: dict, over: dict):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def parse_override(text: str):
    """``section.key=value`` -> ``("section", "key", value)``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value of {key}: {e}") from None
    return parts[0], parts[1], value


def load_config(path=None, overrides=(), profile="default") -> RunConfig:
    """Profile defaults, then the YAML file, then ``--set`` overrides (later wins)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    d = copy.deepcopy(PROFILES[profile])
    if path:
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of sections")
        d = _merge(d, loaded or {})
    for text in overrides:
        section, key, value = parse_override(text)
        d.setdefault(section, {})
        if not isinstance(d[section], dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        d[section][key] = value
    return RunConfig.from_dict(d)

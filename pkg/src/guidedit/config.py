"""Run configuration: a YAML file of sections, validated strictly against dataclass defaults.

Every key has a default, so an empty file is a valid config. Unknown keys and
type mismatches raise :class:`ConfigError` naming the dotted key path.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .codec import CodecConfig
from .data import DatasetSpec
from .denoiser import DenoiserConfig
from .guidance import GuidanceConfig
from .perceptual import PerceptualConfig
from .pipeline import PipelineConfig
from .schedule import NoiseSchedule, make_schedule

OUTPUT_ENV = "GUIDEDIT_OUTPUT_DIR"
AUTO = "auto"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    inference_steps: int = 50


def _defaults(cls, drop=("seed",)) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in drop:
            continue
        value = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def default_raw() -> dict:
    guidance = _defaults(GuidanceConfig)
    guidance["text_range"] = AUTO
    guidance["perceptual_range"] = AUTO
    pipeline = _defaults(PipelineConfig, drop=("inference_steps",))
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "dataset": _defaults(DatasetSpec, drop=()),
        "schedule": _defaults(ScheduleConfig),
        "codec": _defaults(CodecConfig),
        "denoiser": _defaults(DenoiserConfig),
        "perceptual": _defaults(PerceptualConfig),
        "guidance": guidance,
        "pipeline": pipeline,
    }


def _check_type(path: str, default: Any, value: Any) -> Any:
    if path.endswith("_range"):
        if value is None or value == AUTO or value == []:
            return value
        if isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return value
        raise ConfigError(f"{path}: expected 'auto', null or [lo, hi] integers, got {value!r}")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:  # pragma: no cover
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def _merge(base: dict, update: Mapping, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown config key")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{path}: expected a section mapping, got {value!r}")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = _check_type(path, base[key], value)
    return out


class RunConfig:
    """Validated, fully-defaulted run configuration."""

    def __init__(self, raw: Mapping | None = None):
        self.raw = _merge(default_raw(), raw or {})
        try:
            self._build()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError("config root must be a mapping")
        return cls(data)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply dotted-path overrides such as ``{"guidance.gamma": 2.0}``."""
        nested: dict = {}
        for dotted, value in overrides.items():
            node = nested
            parts = dotted.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        merged = _merge(self.raw, nested)
        return RunConfig(merged)

    def _build(self) -> None:
        r = self.raw
        seed = r["seed"]
        self.dataset = DatasetSpec(**r["dataset"])
        self.schedule_cfg = ScheduleConfig(**r["schedule"])
        self.codec = CodecConfig(**r["codec"], seed=seed)
        self.denoiser = DenoiserConfig(**r["denoiser"], seed=seed)
        self.perceptual = PerceptualConfig(**r["perceptual"], seed=seed)
        steps = self.schedule_cfg.inference_steps
        self.pipeline = PipelineConfig(**{**r["pipeline"], "edit_slots": tuple(r["pipeline"]["edit_slots"])},
                                       inference_steps=steps)
        g = dict(r["guidance"])
        auto = GuidanceConfig.default_for(steps)
        for name in ("text_range", "perceptual_range"):
            if g[name] == AUTO:
                g[name] = getattr(auto, name)
            elif g[name] in (None, []):
                g[name] = None
            else:
                g[name] = tuple(g[name])
        self.guidance = GuidanceConfig(**g)
        self.guidance.validate_steps(steps)
        self.schedule()  # validates bounds

    def schedule(self) -> NoiseSchedule:
        s = self.schedule_cfg
        return make_schedule(s.T, s.kind, s.beta_min, s.beta_max)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.raw["output_dir"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

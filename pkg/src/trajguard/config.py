"""Single JSON configuration file for the whole pipeline.

Precedence: command-line flags over the file over built-in defaults.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, TrajGuardError
from .repair import RepairConfig
from .verify import CheckConfig
from .window import DiversityConfig


@dataclass(frozen=True)
class WindowSettings:
    L_seconds: float = 5.0
    clip_seconds: float = 5.0
    stride_seconds: float = 1.0
    sampling: str = "hierarchical"  # or "pairs"

    def __post_init__(self):
        if min(self.L_seconds, self.clip_seconds, self.stride_seconds) <= 0:
            raise ConfigError("window durations must be positive")
        if self.sampling not in ("hierarchical", "pairs"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")


@dataclass(frozen=True)
class MetricSettings:
    combine: str = "max"  # or "rotation"
    per_frame_cosine: bool = False
    normalize: bool = True

    def __post_init__(self):
        if self.combine not in ("max", "rotation"):
            raise ConfigError(f"unknown combine rule {self.combine!r}")


@dataclass(frozen=True)
class SimulateSettings:
    n_steps: int = 61
    knot_count: int | None = None
    n_points: int = 60
    noise_px: float = 0.5

    def __post_init__(self):
        if self.n_steps < 8:
            raise ConfigError("n_steps must be >= 8")
        if self.n_points < 8:
            raise ConfigError("n_points must be >= 8")
        if self.noise_px < 0:
            raise ConfigError("noise_px must be >= 0")


@dataclass(frozen=True)
class RetrieverSettings:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    M_q: int = 8
    M_mem: int = 8
    d_m: int = 16
    D: int = 96
    positional: bool = True
    zero_outputs: bool = True
    # full-scale sizes, kept for reference only
    reference_M_mem_per_frame: int = 4 * 782
    reference_d_m: int = 1024
    reference_D: int = 3072


@dataclass(frozen=True)
class PipelineConfig:
    check: CheckConfig = field(default_factory=CheckConfig)
    repair: RepairConfig = field(default_factory=RepairConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    window: WindowSettings = field(default_factory=WindowSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    retriever: RetrieverSettings = field(default_factory=RetrieverSettings)
    seed: int = 0
    pose_rate_hz: float = 4.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, **kw) -> PipelineConfig:
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TrajGuardError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be an object")
    sections = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        default = getattr(PipelineConfig(), name)
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, name)
        else:
            kw[name] = value
    if "seed" in kw and (not isinstance(kw["seed"], int) or kw["seed"] < 0):
        raise ConfigError("seed must be a non-negative integer")
    if "pose_rate_hz" in kw and not (isinstance(kw["pose_rate_hz"], (int, float)) and kw["pose_rate_hz"] > 0):
        raise ConfigError("pose_rate_hz must be positive")
    return PipelineConfig(**kw)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{p}: no such configuration file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)

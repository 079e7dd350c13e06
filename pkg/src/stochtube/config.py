"""Run configuration: a versioned YAML document validated with pydantic."""

from __future__ import annotations

import copy
import math
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SCHEMA_VERSION = 1
STATE_DIMS = {"ou": 1, "ltv_decay": 2, "pvtol": 6}
INPUT_DIMS = {"ou": 0, "ltv_decay": 0, "pvtol": 2}
SHIPPED = ("ou", "fig2", "pvtol")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlanConfig(_Strict):
    kind: Literal["hold", "min_jerk"] = "hold"
    start: list[float] = Field(default_factory=lambda: [0.0, 0.0], min_length=2, max_length=2)
    goal: list[float] = Field(default_factory=lambda: [0.0, 0.0], min_length=2, max_length=2)


class SystemConfig(_Strict):
    name: Literal["ou", "ltv_decay", "pvtol"]
    params: dict[str, float] = Field(default_factory=dict)
    x0: Optional[list[float]] = None
    plan: Optional[PlanConfig] = None


class LqrConfig(_Strict):
    """Diagonal weights; ``terminal`` is the algebraic Riccati solution at the
    final linearization (``care``) or the running state weight (``Q``)."""

    Q: list[float]
    R: list[float]
    terminal: Literal["care", "Q"] = "care"

    @field_validator("Q", "R")
    @classmethod
    def _positive(cls, v):
        if not v or any(not (w > 0 and math.isfinite(w)) for w in v):
            raise ValueError("LQR weights must be positive and finite")
        return v


class MetricConfig(_Strict):
    source: Literal["riccati", "csv", "identity"] = "identity"
    path: Optional[str] = None
    lqr: Optional[LqrConfig] = None


class RatesConfig(_Strict):
    half_widths: Optional[list[float]] = None
    relative: bool = True
    samples: int = Field(32, ge=1)


class BoundsConfig(_Strict):
    delta: float = Field(gt=0, lt=1)
    eps: Union[float, Literal["auto"]] = 0.9
    T: float = Field(gt=0)
    dt_seg: float = Field(0.1, gt=0)
    grid_dt: Optional[float] = Field(None, gt=0)
    segment_weighting: Literal["absolute", "rebased"] = "absolute"

    @field_validator("eps")
    @classmethod
    def _eps_range(cls, v):
        if v != "auto" and not 0 < v < 1:
            raise ValueError("eps must lie in (0, 1) or be 'auto'")
        return v


class SimulationConfig(_Strict):
    dt: float = Field(gt=0)
    N: int = Field(ge=1)
    master_seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1)
    save_paths: int = Field(20, ge=0)


class CircleConfig(_Strict):
    center: list[float] = Field(min_length=2, max_length=2)
    radius: float = Field(gt=0)


class BoxConfig(_Strict):
    lower: list[float] = Field(min_length=2, max_length=2)
    upper: list[float] = Field(min_length=2, max_length=2)


class SafeSetConfig(_Strict):
    circles: list[CircleConfig] = Field(default_factory=list)
    boxes: list[BoxConfig] = Field(default_factory=list)
    goal: CircleConfig
    proj_coords: tuple[int, int] = (0, 1)


class OutputConfig(_Strict):
    dir: str = "out"
    figures: bool = True


class RunConfig(_Strict):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    name: str = "run"
    system: SystemConfig
    metric: MetricConfig = Field(default_factory=MetricConfig)
    rates: RatesConfig = Field(default_factory=RatesConfig)
    bounds: BoundsConfig
    simulation: SimulationConfig
    safe_set: Optional[SafeSetConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)

    @property
    def state_dim(self) -> int:
        return STATE_DIMS[self.system.name]

    @model_validator(mode="after")
    def _consistent(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {self.schema_version} (expected {SCHEMA_VERSION})")
        n, p = self.state_dim, INPUT_DIMS[self.system.name]
        if self.system.x0 is not None and len(self.system.x0) != n:
            raise ValueError(f"system.x0 has length {len(self.system.x0)}, expected {n}")
        if self.system.plan is not None and self.system.name != "pvtol":
            raise ValueError("system.plan is only available for pvtol")
        steps = self.bounds.T / self.simulation.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("bounds.T must be an integer multiple of simulation.dt")
        m = self.metric
        if m.source == "riccati":
            if p == 0:
                raise ValueError(f"metric.source riccati needs a system with inputs; {self.system.name} has none")
            if m.lqr is None:
                raise ValueError("metric.source riccati requires metric.lqr")
            if len(m.lqr.Q) != n or len(m.lqr.R) != p:
                raise ValueError(f"metric.lqr needs {n} Q weights and {p} R weights")
        if m.source == "csv" and not m.path:
            raise ValueError("metric.source csv requires metric.path")
        if self.rates.half_widths is not None:
            hw = self.rates.half_widths
            if len(hw) != n or any(not w > 0 for w in hw):
                raise ValueError(f"rates.half_widths must hold {n} positive numbers")
        if self.safe_set is not None and max(self.safe_set.proj_coords) >= n:
            raise ValueError(f"safe_set.proj_coords out of range for dimension {n}")
        return self

    def dump(self) -> dict:
        return self.model_dump(by_alias=True, mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.dump(), sort_keys=False, default_flow_style=None)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: Any, base_dir: Optional[Path] = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "schema" not in data:
        raise ConfigError("config is missing the 'schema' version key")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    if cfg.metric.path and base_dir is not None and not Path(cfg.metric.path).is_absolute():
        cfg.metric.path = str((base_dir / cfg.metric.path).resolve())
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(data, path.parent)


def shipped_config(name: str) -> RunConfig:
    """One of the configurations bundled with the package."""
    if name not in SHIPPED:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(SHIPPED)}")
    text = resources.files("stochtube").joinpath("configs", f"{name}.yaml").read_text(encoding="utf-8")
    return parse_config(yaml.safe_load(text))


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict merge; values in ``overrides`` win."""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def with_overrides(cfg: RunConfig, overrides: Optional[dict]) -> RunConfig:
    if not overrides:
        return cfg
    return parse_config(merge(cfg.dump(), overrides))


def flag_overrides(*, out=None, seed=None, delta=None, eps=None, dt_seg=None, n=None) -> dict:
    """Translate CLI flags into a nested override mapping."""
    ov: dict = {}
    if out is not None:
        ov.setdefault("output", {})["dir"] = str(out)
    if seed is not None:
        ov.setdefault("simulation", {})["master_seed"] = int(seed)
    if n is not None:
        ov.setdefault("simulation", {})["N"] = int(n)
    if delta is not None:
        ov.setdefault("bounds", {})["delta"] = float(delta)
    if eps is not None:
        ov.setdefault("bounds", {})["eps"] = eps if eps == "auto" else float(eps)
    if dt_seg is not None:
        ov.setdefault("bounds", {})["dt_seg"] = float(dt_seg)
    return ov

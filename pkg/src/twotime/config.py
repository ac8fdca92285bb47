"""Experiment configuration: a YAML document validated by pydantic models."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridBlock(_Block):
    x_min: float
    x_max: float
    n_points: int = Field(gt=0)


class StateBlock(_Block):
    sigma: float = Field(gt=0)
    p: float = 0.0
    center: float = 0.0


class DynamicsBlock(_Block):
    mass: float = Field(default=1.0, gt=0)
    t1: float = Field(default=0.0, ge=0)
    t2: float

    @model_validator(mode="after")
    def _ordered(self):
        if not self.t2 > self.t1:
            raise ValueError("t2 must exceed t1")
        return self


class DeviceBlock(_Block):
    kind: Literal["sharp", "smeared"] = "sharp"
    delta: float = Field(gt=0)
    origin: float = 0.0


class PartitionBlock(_Block):
    first: list[float] = Field(min_length=2)
    second: list[float] = Field(min_length=2)

    @field_validator("first", "second")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("set boundaries must increase strictly")
        return v


class RunBlock(_Block):
    trials: int = Field(default=100_000, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    checkpoints: Optional[list[int]] = None
    workers: int = Field(default=1, gt=0)
    tolerance: float = Field(default=1e-3, gt=0)
    pairs: Optional[list[tuple[int, int]]] = None

    @field_validator("checkpoints")
    @classmethod
    def _checkpoints(cls, v):
        if v is not None and (len(v) < 4 or any(b <= a for a, b in zip(v, v[1:])) or v[0] <= 0):
            raise ValueError("need at least 4 strictly increasing positive checkpoints")
        return v


class ScanBlock(_Block):
    size: float = Field(default=1.2, gt=0)
    x1: float = 0.0
    offsets: Optional[list[float]] = None
    deltas: Optional[list[float]] = None


class AnalyticBlock(_Block):
    r_values: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    span: float = Field(default=2.0, gt=0)
    coarse_size: float = Field(default=1.2, gt=0)


class OutputBlock(_Block):
    directory: Optional[str] = None
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(_Block):
    scenario: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    grid: GridBlock
    state: StateBlock
    dynamics: DynamicsBlock
    device: DeviceBlock
    partition: PartitionBlock
    run: RunBlock = Field(default_factory=RunBlock)
    scan: ScanBlock = Field(default_factory=ScanBlock)
    analytic: AnalyticBlock = Field(default_factory=AnalyticBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate; raises ``yaml.YAMLError`` or ``pydantic.ValidationError``."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return ExperimentConfig.model_validate(data if data is not None else {})


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Return a re-validated copy with command-line overrides applied."""
    data = config.model_dump()
    if overrides.get("seed") is not None:
        data["run"]["seed"] = overrides["seed"]
    if overrides.get("trials") is not None:
        data["run"]["trials"] = overrides["trials"]
    if overrides.get("workers") is not None:
        data["run"]["workers"] = overrides["workers"]
    if overrides.get("out") is not None:
        data["output"]["directory"] = overrides["out"]
    fmt = overrides.get("format")
    if fmt is not None:
        data["output"]["formats"] = ["csv", "json"] if fmt == "both" else [fmt]
    if overrides.get("delta") is not None:
        data["device"]["delta"] = overrides["delta"]
    if overrides.get("tau") is not None:
        data["dynamics"]["t2"] = data["dynamics"]["t1"] + overrides["tau"]
    if overrides.get("first_boundaries") is not None:
        data["partition"]["first"] = overrides["first_boundaries"]
    if overrides.get("second_boundaries") is not None:
        data["partition"]["second"] = overrides["second_boundaries"]
    return ExperimentConfig.model_validate(data)

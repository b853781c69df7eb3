"""Run configuration: a TOML file mirroring the dataclasses, overridable by flags."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fusion import FusionConfig
from .losses import LossWeights
from .optimizer import Schedule, StepSizes


@dataclass
class RunConfig:
    """Everything a pipeline run needs, reproducible from one file."""

    dataset: str = ""
    output: str = "out"
    oracle: str = "stub:identity,harmonic"
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    render_frames: int = 8
    render_cameras: str = ""  # optional explicit camera list (JSON)


def _fill(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a TOML run config; missing sections fall back to defaults."""
    if path is None:
        return RunConfig()
    with open(path, "rb") as f:
        data = tomllib.load(f)
    cfg = RunConfig()
    for key in ("dataset", "output", "oracle", "seed", "render_frames", "render_cameras"):
        if key in data:
            setattr(cfg, key, data.pop(key))
    if "background" in data:
        bg = data.pop("background")
        cfg.background = (float(bg[0]), float(bg[1]), float(bg[2]))
    if "fusion" in data:
        cfg.fusion = _fill(FusionConfig, data.pop("fusion"))
    if "weights" in data:
        cfg.weights = _fill(LossWeights, data.pop("weights"))
    if "schedule" in data:
        sched = data.pop("schedule")
        if "step_sizes" in sched:
            sched["step_sizes"] = _fill(StepSizes, sched["step_sizes"])
        if "snapshot_iters" in sched:
            sched["snapshot_iters"] = tuple(sched["snapshot_iters"])
        cfg.schedule = _fill(Schedule, sched)
    if data:
        raise ValueError(f"unknown config sections: {sorted(data)}")
    cfg.schedule.validate()
    return cfg

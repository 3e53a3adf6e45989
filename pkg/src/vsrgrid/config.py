"""Experiment configuration: strict JSON loading and object construction.

Schedule-critical fields (total iterations, base lr, shapes) have no silent
defaults: shapes are either explicit lists or the literal string "derive"
together with the baseline size to derive from. Unknown keys anywhere are
rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import schedule as sch

SPATIAL_ITEM = {"type": "array", "items": {"type": "integer", "minimum": 1},
                "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schedule", "lr", "model", "data", "run"],
    "properties": {
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode", "spatial", "temporal", "total_iterations", "batch"],
            "properties": {
                "mode": {"enum": ["hierarchical", "synchronous", "fixed"]},
                "spatial": {"oneOf": [{"const": "derive"},
                                      {"type": "array", "items": SPATIAL_ITEM,
                                       "minItems": 1}]},
                "temporal": {"oneOf": [{"const": "derive"},
                                       {"type": "array",
                                        "items": {"type": "integer", "minimum": 1},
                                        "minItems": 1}]},
                "baseline_spatial": SPATIAL_ITEM,
                "baseline_temporal": {"type": "integer", "minimum": 1},
                "total_iterations": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 1},
                "extra_stages": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["spatial", "temporal", "iterations"],
                        "properties": {
                            "spatial": SPATIAL_ITEM,
                            "temporal": {"type": "integer", "minimum": 1},
                            "iterations": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            },
        },
        "lr": {
            "type": "object",
            "additionalProperties": False,
            "required": ["base", "mode", "warmup_iters"],
            "properties": {
                "base": {"type": "number", "exclusiveMinimum": 0},
                "mode": {"enum": list(sch.LR_MODES)},
                "warmup_iters": {"type": "integer", "minimum": 0},
                "warmup_start_factor": {"type": "number", "minimum": 0, "maximum": 1},
                "base_batch": {"type": "integer", "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["channels", "blocks", "seed"],
            "properties": {
                "channels": {"type": "integer", "minimum": 1},
                "blocks": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train_clips", "val_clips", "frames", "hr_size"],
            "properties": {
                "train_clips": {"type": "integer", "minimum": 1},
                "val_clips": {"type": "integer", "minimum": 1},
                "frames": {"type": "integer", "minimum": 1},
                "hr_size": SPATIAL_ITEM,
                "seed_offset": {"type": "integer", "minimum": 0},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sample_seed"],
            "properties": {
                "eval_interval": {"type": "integer", "minimum": 0},
                "out_dir": {"type": "string"},
                "precision": {"enum": ["f32", "f64"]},
                "workers": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": list(["sgd", "sgd-momentum", "adam"])},
                "sample_seed": {"type": "integer"},
            },
        },
    },
}


class ConfigError(ValueError):
    """Config fails schema validation or cross-field consistency."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; build_* methods produce objects."""

    raw: dict

    @property
    def schedule_cfg(self) -> dict:
        return self.raw["schedule"]

    @property
    def lr_cfg(self) -> dict:
        return self.raw["lr"]

    @property
    def model_cfg(self) -> dict:
        return self.raw["model"]

    @property
    def data_cfg(self) -> dict:
        return self.raw["data"]

    @property
    def run_cfg(self) -> dict:
        return self.raw["run"]

    def build_schedule(self) -> sch.MultigridSchedule:
        cfg = self.schedule_cfg
        batch = cfg["batch"]
        total = cfg["total_iterations"]
        spatial = cfg["spatial"]
        temporal = cfg["temporal"]
        if spatial == "derive":
            h, w = cfg["baseline_spatial"]
            spatial_cycle = sch.derive_spatial_sizes(h, w)
        else:
            spatial_cycle = sch.SpatialCycle(tuple(tuple(s) for s in spatial))
        if temporal == "derive":
            temporal_cycle = sch.derive_temporal_sizes(cfg["baseline_temporal"])
        else:
            temporal_cycle = sch.TemporalCycle(tuple(temporal))
        mode = cfg["mode"]
        if mode == "hierarchical":
            built = sch.compose_hierarchical(spatial_cycle, temporal_cycle, total, batch)
        elif mode == "synchronous":
            pairs = list(zip(spatial_cycle.sizes, temporal_cycle.sizes))
            built = sch.compose_synchronous(pairs, total, batch)
        else:  # fixed
            pairs = [(spatial_cycle.sizes[-1], temporal_cycle.sizes[-1])]
            built = sch.compose_synchronous(pairs, total, batch)
        for extra in cfg.get("extra_stages", []):
            built = sch.append_stage(built, sch.StagePlan(
                spatial=tuple(extra["spatial"]), temporal=extra["temporal"],
                batch=batch, iterations=extra["iterations"]))
        return built

    def build_lr_spec(self) -> sch.LrSpec:
        cfg = self.lr_cfg
        base = cfg["base"]
        base_batch = cfg.get("base_batch")
        if base_batch is not None:
            base = sch.scaled_lr(base, base_batch, self.schedule_cfg["batch"])
        return sch.LrSpec(base_lr=base, mode=cfg["mode"],
                          warmup_iters=cfg["warmup_iters"],
                          warmup_start_factor=cfg.get("warmup_start_factor", 0.0))

    def clip_seeds(self) -> tuple[list[int], list[int]]:
        """Disjoint train/validation clip seed ranges."""
        cfg = self.data_cfg
        off = cfg.get("seed_offset", 0)
        train = list(range(off, off + cfg["train_clips"]))
        val = list(range(off + cfg["train_clips"],
                         off + cfg["train_clips"] + cfg["val_clips"]))
        return train, val

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def validate_config(raw: dict) -> ExperimentConfig:
    """Schema plus cross-field checks; raises ConfigError with a one-line
    reason on the first problem found."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from exc
    scfg = raw["schedule"]
    if scfg["spatial"] == "derive" and "baseline_spatial" not in scfg:
        raise ConfigError("schedule/spatial: 'derive' requires baseline_spatial")
    if scfg["temporal"] == "derive" and "baseline_temporal" not in scfg:
        raise ConfigError("schedule/temporal: 'derive' requires baseline_temporal")
    if scfg["mode"] == "synchronous" and isinstance(scfg["spatial"], list) \
            and isinstance(scfg["temporal"], list) \
            and len(scfg["spatial"]) != len(scfg["temporal"]):
        raise ConfigError("schedule: synchronous mode pairs spatial with temporal, "
                          "lists must have equal length")
    cfg = ExperimentConfig(raw=raw)
    try:
        sched = cfg.build_schedule()
        cfg.build_lr_spec()
    except sch.ScheduleError as exc:
        raise ConfigError(str(exc)) from exc
    if raw["lr"]["warmup_iters"] >= sched.total_iterations:
        raise ConfigError(
            f"lr/warmup_iters: {raw['lr']['warmup_iters']} must be below "
            f"total iterations {sched.total_iterations}")
    hr_h, hr_w = raw["data"]["hr_size"]
    lr_h, lr_w = hr_h // 4, hr_w // 4
    if hr_h % 4 or hr_w % 4:
        raise ConfigError(f"data/hr_size: {hr_h}x{hr_w} must be divisible by 4")
    for stage in sched.stages:
        h, w = stage.spatial
        if h > lr_h or w > lr_w:
            raise ConfigError(
                f"schedule: stage crop {h}x{w} exceeds LR frame {lr_h}x{lr_w}")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_config(raw)

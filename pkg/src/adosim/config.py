"""Single-file JSON run configuration.

A run config materializes every default, so the copy persisted in a run
directory is self-contained: loading it reproduces the run bit-exactly.
Unknown keys are rejected by name rather than silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional

from .policy import NetworkConfig
from .ppo import PpoConfig
from .synthetic import RoadConfig, RoadSegment, default_road, \
    generate_synthetic_trace
from .tasks import TaskSpec
from .trace import Trace, load_trace


def _check_keys(d: dict, allowed, where: str) -> None:
    for key in d:
        if key not in allowed:
            raise ValueError(f"unknown key {key!r} in {where}")


def _typed(d: dict, key: str, default, where: str):
    value = d.get(key, default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{where}.{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ValueError(f"{where}.{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{where}.{key} must be a number")
        return float(value)
    return value


# -- section serializers -------------------------------------------------------


def road_to_dict(road: RoadConfig) -> dict:
    d = dataclasses.asdict(road)
    d["segments"] = [{"length": s.length, "kappa": s.kappa}
                     for s in road.segments]
    return d


def road_from_dict(d: dict, where: str = "trace.road") -> RoadConfig:
    defaults = default_road()
    allowed = {f.name for f in dataclasses.fields(RoadConfig)}
    _check_keys(d, allowed, where)
    segments = []
    for i, seg in enumerate(d.get("segments", road_to_dict(defaults)["segments"])):
        _check_keys(seg, {"length", "kappa"}, f"{where}.segments[{i}]")
        segments.append(RoadSegment(float(seg["length"]),
                                    float(seg.get("kappa", 0.0))))
    kwargs = {}
    for name in ("lane_width", "wall_offset", "wall_height", "frame_spacing",
                 "capture_speed", "far_clip", "texture_cell"):
        kwargs[name] = _typed(d, name, getattr(defaults, name), where)
    return RoadConfig(segments=tuple(segments), **kwargs)


def task_to_dict(spec: TaskSpec) -> dict:
    d = dataclasses.asdict(spec)
    for name in ("gap_range", "lateral_range", "speed_range",
                 "overtake_margin", "dilation"):
        d[name] = list(getattr(spec, name))
    return d


def task_from_dict(d: dict, where: str = "task") -> TaskSpec:
    defaults = TaskSpec(d.get("task", "lane_follow"))
    allowed = {f.name for f in dataclasses.fields(TaskSpec)}
    _check_keys(d, allowed, where)
    kwargs = {"task": defaults.task}
    for field in dataclasses.fields(TaskSpec):
        if field.name == "task":
            continue
        default = getattr(defaults, field.name)
        if isinstance(default, tuple):
            value = d.get(field.name, list(default))
            if len(value) != 2:
                raise ValueError(f"{where}.{field.name} must have 2 entries")
            kwargs[field.name] = (float(value[0]), float(value[1]))
        else:
            kwargs[field.name] = _typed(d, field.name, default, where)
    return TaskSpec(**kwargs)


def ppo_to_dict(config: PpoConfig) -> dict:
    return dataclasses.asdict(config)


def ppo_from_dict(d: dict, where: str = "ppo") -> PpoConfig:
    defaults = PpoConfig()
    allowed = {f.name for f in dataclasses.fields(PpoConfig)}
    _check_keys(d, allowed, where)
    kwargs = {f.name: _typed(d, f.name, getattr(defaults, f.name), where)
              for f in dataclasses.fields(PpoConfig)}
    return PpoConfig(**kwargs)


def network_from_dict(d: dict, where: str = "network") -> NetworkConfig:
    mode = d.get("mode", "privileged")
    if mode == "privileged":
        defaults = NetworkConfig.privileged()
    elif mode == "pixels":
        defaults = NetworkConfig.pixels()
    else:
        raise ValueError(f"{where}.mode must be privileged or pixels")
    allowed = {f.name for f in dataclasses.fields(NetworkConfig)}
    _check_keys(d, allowed, where)
    merged = defaults.to_dict()
    merged.update(d)
    return NetworkConfig.from_dict(merged)


# -- run config ----------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    out_dir: str
    trace_path: Optional[str]
    road: Optional[RoadConfig]
    road_seed: int
    task: TaskSpec
    network: NetworkConfig
    ppo: PpoConfig
    train_seed: int
    augment: bool
    eval_episodes: int
    eval_seed: int
    eval_workers: int

    def __post_init__(self):
        if (self.trace_path is None) == (self.road is None):
            raise ValueError(
                "trace section needs exactly one of 'path' or 'road'")
        if self.eval_episodes < 0 or self.eval_workers < 1:
            raise ValueError("eval counts out of range")

    def to_dict(self) -> dict:
        trace = {"path": self.trace_path} if self.trace_path is not None \
            else {"road": road_to_dict(self.road), "seed": self.road_seed}
        return {
            "out_dir": self.out_dir,
            "trace": trace,
            "task": task_to_dict(self.task),
            "network": self.network.to_dict(),
            "ppo": ppo_to_dict(self.ppo),
            "train": {"seed": self.train_seed, "augment": self.augment},
            "eval": {"episodes": self.eval_episodes,
                     "seed": self.eval_seed,
                     "workers": self.eval_workers},
        }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        _check_keys(d, {"out_dir", "trace", "task", "network", "ppo",
                        "train", "eval"}, "run config")
        if "out_dir" not in d:
            raise ValueError("run config requires out_dir")
        trace = d.get("trace", {"road": {}, "seed": 0})
        _check_keys(trace, {"path", "road", "seed"}, "trace")
        trace_path = trace.get("path")
        road = None
        if "road" in trace:
            road = road_from_dict(trace["road"])
        elif trace_path is None:
            road = default_road()
        train = d.get("train", {})
        _check_keys(train, {"seed", "augment"}, "train")
        ev = d.get("eval", {})
        _check_keys(ev, {"episodes", "seed", "workers"}, "eval")
        return RunConfig(
            out_dir=str(d["out_dir"]),
            trace_path=None if trace_path is None else str(trace_path),
            road=road,
            road_seed=_typed(trace, "seed", 0, "trace"),
            task=task_from_dict(d.get("task", {})),
            network=network_from_dict(d.get("network", {})),
            ppo=ppo_from_dict(d.get("ppo", {})),
            train_seed=_typed(train, "seed", 0, "train"),
            augment=_typed(train, "augment", False, "train"),
            eval_episodes=_typed(ev, "episodes", 100, "eval"),
            eval_seed=_typed(ev, "seed", 0, "eval"),
            eval_workers=_typed(ev, "workers", 1, "eval"),
        )


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    if not isinstance(d, dict):
        raise ValueError("run config must be a JSON object")
    config = RunConfig.from_dict(d)
    if config.trace_path is not None and not os.path.isdir(config.trace_path):
        raise ValueError(f"trace path {config.trace_path!r} does not exist")
    return config


def save_run_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def resolve_trace(config: RunConfig) -> Trace:
    if config.trace_path is not None:
        return load_trace(config.trace_path)
    return generate_synthetic_trace(config.road, seed=config.road_seed)

"""Run configuration: strict JSON with every field required."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .comparator import MODES, OBJECTIVES
from .detector import AGGREGATIONS, RPN_VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    seed: int
    num_images: int


@dataclass
class SplitConfig:
    base: list[int]
    novel: list[int]


@dataclass
class ScheduleConfig:
    base_lr: float
    warmup_steps: int
    decay_steps: list[int]
    decay_factor: float
    momentum: float
    weight_decay: float


@dataclass
class ComparatorConfig:
    mode: str
    objective: str


@dataclass
class SuMoCoConfig:
    enabled: bool
    queue_size: int
    alpha: float


@dataclass
class EvalConfig:
    dataset_seed: int
    num_images: int
    episodes: int
    way: int
    shot: int
    episode_seed: int


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetConfig
    split: SplitConfig
    way: int
    shot: int
    iterations: int
    episodes_per_iteration: int
    schedule: ScheduleConfig
    comparator: ComparatorConfig
    aggregation: str
    sumoco: SuMoCoConfig
    rpn_variant: str
    eval: EvalConfig
    output_dir: str

    def validate(self) -> RunConfig:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dataset.num_images >= 1, "dataset.num_images must be >= 1")
        need(not set(self.split.base) & set(self.split.novel), "split.base and split.novel overlap")
        need(all(0 <= c < 10 for c in self.split.base + self.split.novel), "split classes must be in 0..9")
        need(2 <= self.way <= len(self.split.base), f"way must be in [2, {len(self.split.base)}]")
        need(self.shot >= 1, "shot must be >= 1")
        need(self.iterations >= 0, "iterations must be >= 0")
        need(self.episodes_per_iteration >= 1, "episodes_per_iteration must be >= 1")
        s = self.schedule
        need(s.base_lr > 0, "schedule.base_lr must be positive")
        need(s.warmup_steps >= 0, "schedule.warmup_steps must be >= 0")
        need(list(s.decay_steps) == sorted(s.decay_steps), "schedule.decay_steps must be ascending")
        need(0 < s.decay_factor <= 1, "schedule.decay_factor must be in (0, 1]")
        need(0 <= s.momentum < 1, "schedule.momentum must be in [0, 1)")
        need(s.weight_decay >= 0, "schedule.weight_decay must be >= 0")
        need(self.comparator.mode in MODES, f"comparator.mode must be one of {MODES}")
        need(self.comparator.objective in OBJECTIVES, f"comparator.objective must be one of {OBJECTIVES}")
        need(self.aggregation in AGGREGATIONS, f"aggregation must be one of {AGGREGATIONS}")
        need(self.rpn_variant in RPN_VARIANTS, f"rpn_variant must be one of {RPN_VARIANTS}")
        need(self.sumoco.queue_size >= 0, "sumoco.queue_size must be >= 0")
        need(0 <= self.sumoco.alpha <= 1, "sumoco.alpha must be in [0, 1]")
        need(not (self.sumoco.enabled and self.comparator.objective != "softmax"),
             "sumoco requires the softmax objective")
        e = self.eval
        need(e.episodes >= 1 and e.way >= 1 and e.shot >= 1, "eval episodes/way/shot must be >= 1")
        need(e.way <= len(self.split.novel), "eval.way exceeds the number of novel classes")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> RunConfig:
        """Copy with dotted-path overrides, e.g. ``replace(**{"comparator.mode": "l2"})``."""
        d = copy.deepcopy(self.to_dict())
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key '{path}'")
            node[leaf] = value
        return from_dict(d)


_SECTIONS = {
    "dataset": DatasetConfig, "split": SplitConfig, "schedule": ScheduleConfig,
    "comparator": ComparatorConfig, "sumoco": SuMoCoConfig, "eval": EvalConfig,
}
_FLOATS = {"base_lr", "decay_factor", "momentum", "weight_decay", "alpha"}


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    missing = names - set(d)
    if missing:
        raise ConfigError(f"missing keys in {where or 'config'}: {sorted(missing)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        v = d[f.name]
        path = f"{where}.{f.name}" if where else f.name
        if f.name in _SECTIONS and cls is RunConfig:
            v = _build(_SECTIONS[f.name], v, path)
        elif f.name in _FLOATS:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path} must be a number")
            v = float(v)
        elif f.type in ("int",) or f.type is int:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{path} must be an integer")
        elif f.type in ("bool",) or f.type is bool:
            if not isinstance(v, bool):
                raise ConfigError(f"{path} must be a boolean")
        elif f.type in ("str",) or f.type is str:
            if not isinstance(v, str):
                raise ConfigError(f"{path} must be a string")
        elif str(f.type).startswith("list"):
            if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
                raise ConfigError(f"{path} must be a list of integers")
        kwargs[f.name] = v
    return cls(**kwargs)


def from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "").validate()


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(d)


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "dataset": {"seed": 1, "num_images": 2000},
    "split": {"base": [0, 1, 2, 3, 4, 5], "novel": [6, 7, 8, 9]},
    "way": 5,
    "shot": 1,
    "iterations": 5000,
    "episodes_per_iteration": 4,
    "schedule": {"base_lr": 0.01, "warmup_steps": 100, "decay_steps": [3500, 4500],
                 "decay_factor": 0.1, "momentum": 0.9, "weight_decay": 1e-4},
    "comparator": {"mode": "cosine", "objective": "softmax"},
    "aggregation": "feature_average",
    "sumoco": {"enabled": False, "queue_size": 100, "alpha": 0.999},
    "rpn_variant": "standard",
    "eval": {"dataset_seed": 101, "num_images": 600, "episodes": 50, "way": 3, "shot": 5,
             "episode_seed": 7},
    "output_dir": "runs/default",
}


def default_config(**overrides) -> RunConfig:
    cfg = from_dict(copy.deepcopy(DEFAULT_CONFIG))
    return cfg.replace(**overrides) if overrides else cfg

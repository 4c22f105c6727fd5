"""Run configuration: one JSON document drives every pipeline stage.

Sections mirror the module configs; unknown sections or keys are
rejected loudly so a typo cannot silently fall back to a default. Every
stage writes the fully-resolved configuration next to its outputs.
"""

import dataclasses
import json
from dataclasses import dataclass
from typing import Tuple

from .dynamics import ModelConfig
from .environment import RoadGeometry
from .uncertainty import UncertaintyConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_cars: int = 240
    road_length_m: float = 400.0
    history: int = 4
    unroll: int = 10
    max_speed: float = 4.0
    spawn_prob: float = 0.35

    def __post_init__(self):
        if self.history < 1 or self.unroll < 1:
            raise ValueError("history and unroll must be positive")


@dataclass(frozen=True)
class CalibrationConfig:
    T: int = 10
    K: int = 4
    K_calib: int = 16
    n_samples: int = 64

    def to_uncertainty(self) -> UncertaintyConfig:
        return UncertaintyConfig(K=self.K, K_calib=self.K_calib,
                                 n_samples=self.n_samples)


@dataclass(frozen=True)
class PolicyBudget:
    """Method-independent training knobs; objective wiring comes from the
    method name (and CLI overrides), not from the config file."""

    T: int = 10
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 300
    clip_norm: float = 10.0
    channels: Tuple[int, ...] = (8, 16, 32)
    strides: Tuple[int, ...] = (2, 2, 2)
    hidden: int = 128


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 20
    max_steps: int = 600
    mode: str = "mean"

    def __post_init__(self):
        if self.mode not in ("mean", "sample"):
            raise ValueError(f"unknown action mode {self.mode!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    uncertainty: CalibrationConfig = CalibrationConfig()
    policy: PolicyBudget = PolicyBudget()
    eval: EvalConfig = EvalConfig()

    def geometry(self) -> RoadGeometry:
        return RoadGeometry(road_length_m=self.data.road_length_m)

    def resolved(self) -> dict:
        out = {"seed": self.seed}
        for name in ("data", "model", "uncertainty", "policy", "eval"):
            d = dataclasses.asdict(getattr(self, name))
            if name == "model":
                d.pop("history", None)  # mirrored from data; lives there
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in d.items()}
        return out

    def resolved_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n"


_TUPLE_FIELDS = ("channels", "strides")
_SECTIONS = {"data": DataConfig, "model": ModelConfig,
             "uncertainty": CalibrationConfig, "policy": PolicyBudget,
             "eval": EvalConfig}


def _build(name, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section {name!r} "
                          f"(allowed: {', '.join(sorted(allowed))})")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
              for k, v in payload.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from e


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r} "
                          f"(allowed: seed, {', '.join(sorted(_SECTIONS))})")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    sections = {}
    for name, cls in _SECTIONS.items():
        payload = raw.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"section {name!r} must be an object")
        payload = dict(payload)
        if name == "model":
            # the window length is a dataset property; the model inherits it
            if "history" in payload:
                raise ConfigError("set history under 'data', not 'model'")
            data_payload = raw.get("data", {})
            payload["history"] = data_payload.get("history",
                                                  DataConfig().history)
        sections[name] = _build(name, cls, payload)
    return RunConfig(seed=seed, **sections)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return config_from_dict(raw)

"""Flat key-value configuration.

File format (version 1)::

    # comment
    config_version = 1
    seed = 0
    world.fov_radius = 5.0
    world.q = [[90.0, 0.0], [0.0, 40.0]]

Keys are ``section.field``; values are JSON literals. Unknown keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    map: str = "house"
    v_max: float = 1.0
    fov_radius: float = 5.0
    n_targets_min: int = 3
    n_targets_max: int = 6
    episode_length: int = 400
    # velocity-increment covariance per step, before q_scale
    q: list = field(default_factory=lambda: [[90.0, 0.0], [0.0, 40.0]])
    q_scale: float = 2e-5
    r_pos: float = 0.05**2
    r_vel: float = 0.05**2
    init_speed: float = 0.3


@dataclass
class FilterSection:
    kappa_q: float = 2.0
    kappa_r: float = 2.0
    sigma_init: float = 10.0


@dataclass
class ExpertsSection:
    w_gain: float = 1.0
    w_dist: float = 0.5
    w_visit: float = 0.2
    tau_unc: float = 25.0
    tau_track: int = 30


@dataclass
class FeaturesSection:
    window: int = 16
    pools: int = 4
    frontier_cap: int = 10


@dataclass
class HorizonSection:
    t_obs: int = 2
    t_pred: int = 16
    t_act: int = 8


@dataclass
class PolicySection:
    i_diff: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: list = field(default_factory=lambda: [256, 256])
    d_e: int = 8
    time_dim: int = 16
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3


@dataclass
class VbllSection:
    prior_var: float = 1.0
    lr: float = 0.3
    lr_final: float = 1e-7
    max_epochs: int = 10000
    grad_tol: float = 1e-6
    learn_noise: bool = True
    init_noise_var: float = 1.0


@dataclass
class SelectorSection:
    strategy: str = "lcb"
    # "lambda" in the config file
    lam: float = 1.0
    mc_passes: int = 20
    dropout: float = 0.1
    hidden: list = field(default_factory=lambda: [64, 64])
    epochs: int = 300
    lr: float = 3e-3


@dataclass
class HarnessSection:
    demo_episodes: int = 30
    eval_episodes: int = 20
    short_episodes: int = 5
    lambda_grid: list = field(default_factory=lambda: [0.0, 0.1, 1.0, 3.0])
    strategies: list = field(default_factory=lambda: ["greedy", "ucb", "thompson", "lcb"])
    latency_trials: int = 100


@dataclass
class Config:
    seed: int = 0
    world: WorldSection = field(default_factory=WorldSection)
    filter: FilterSection = field(default_factory=FilterSection)
    experts: ExpertsSection = field(default_factory=ExpertsSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    horizon: HorizonSection = field(default_factory=HorizonSection)
    policy: PolicySection = field(default_factory=PolicySection)
    vbll: VbllSection = field(default_factory=VbllSection)
    selector: SelectorSection = field(default_factory=SelectorSection)
    harness: HarnessSection = field(default_factory=HarnessSection)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"config_version": CONFIG_VERSION, "seed": self.seed}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if not dataclasses.is_dataclass(section):
                continue
            for sf in dataclasses.fields(section):
                flat[f"{f.name}.{_file_key(sf.name)}"] = getattr(section, sf.name)
        return flat

    def dumps(self) -> str:
        lines = [f"{k} = {json.dumps(v)}" for k, v in self.to_flat().items()]
        return "\n".join(lines) + "\n"

    def replace(self, **flat_overrides: Any) -> "Config":
        """Copy with overrides given as ``section__field=value``."""
        flat = self.to_flat()
        for k, v in flat_overrides.items():
            flat[k.replace("__", ".")] = v
        return Config.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "Config":
        cfg = cls()
        version = flat.get("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version}")
        for key, value in flat.items():
            if key == "config_version":
                continue
            if key == "seed":
                cfg.seed = int(value)
                continue
            section_name, _, name = key.partition(".")
            section = getattr(cfg, section_name, None)
            attr = _attr_key(name)
            if not dataclasses.is_dataclass(section) or not hasattr(section, attr):
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(section, attr)
            setattr(section, attr, _coerce(key, value, default))
        return cfg


def _file_key(attr: str) -> str:
    return "lambda" if attr == "lam" else attr


def _attr_key(name: str) -> str:
    return "lam" if name == "lambda" else name


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected list, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected string, got {value!r}")
    return value


def parse_config(text: str) -> Config:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        try:
            flat[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value {value.strip()!r}") from exc
    return Config.from_flat(flat)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())

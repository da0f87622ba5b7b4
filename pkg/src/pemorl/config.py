"""Run configuration: one TOML document with flat sections.

Sections are ``sim``, ``data``, ``model``, ``learner``, ``trainer`` and
``baseline``, plus top-level ``seed`` and ``out``. Unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .auction_env import BehaviorParams, SimConfig

SEED_ENV = "PEMORL_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    episodes: int = 125  # 2000 transitions at T = 16
    behaviors: list = field(default_factory=lambda: [[0.8, 0.1], [0.9, 0.1], [1.0, 0.1], [1.1, 0.1], [1.2, 0.1]])
    background: list = field(default_factory=lambda: [1.0, 0.1])
    test_behaviors: list = field(default_factory=lambda: [[0.4, 0.2], [0.7, 0.2], [1.0, 0.2], [1.5, 0.2], [2.0, 0.2]])
    test_episodes: int = 60

    def behavior_params(self) -> list:
        return [BehaviorParams(float(m), float(s)) for m, s in self.behaviors]

    def test_behavior_params(self) -> list:
        return [BehaviorParams(float(m), float(s)) for m, s in self.test_behaviors]

    def background_params(self, n_advertisers: int) -> list:
        m, s = self.background
        return [BehaviorParams(float(m), float(s)) for _ in range(n_advertisers - 1)]


@dataclass
class ModelConfig:
    embed_dim: int = 32
    n_heads: int = 4
    hidden: int = 64
    n_encoders: int = 1
    layer_norm: bool = False
    covariance: str = "diag"
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    n_members: int = 4


@dataclass
class LearnerConfig:
    lam: float = 3.0
    gamma: float = 1.0
    alpha: float = 1e-3
    eta: float = 3e-4
    hidden: int = 64
    grid_size: int = 11
    tau: float = 0.05


@dataclass
class TrainerConfig:
    rollout_horizon: int = 5
    n_starts: int = 256
    mix_ratio: float = 0.5
    max_iterations: int = 40
    min_iterations: int = 10
    conv_window: int = 5
    conv_tol: float = 0.01
    q_steps: int = 40
    policy_steps: int = 10
    batch_size: int = 256
    eval_episodes: int = 40
    n_projections: int = 128


@dataclass
class BaselineConfig:
    # deliberate mis-specification of the analytic simulator
    gsp_value_factor: float = 1.5
    gsp_impression_factor: float = 0.7
    gsp_variance: float = 1.0


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0
    out: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Short content hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **sections) -> "RunConfig":
        """Copy with section fields overridden, e.g. ``replace(learner={"lam": 0.0})``."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                d[key].update(val)
            else:
                d[key] = val
        return from_dict(d)


_SECTIONS = {
    "sim": SimConfig, "data": DataConfig, "model": ModelConfig, "learner": LearnerConfig,
    "trainer": TrainerConfig, "baseline": BaselineConfig,
}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}]: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = sorted(set(d) - set(_SECTIONS) - {"seed", "out"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = d.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(cls, section, name)
    cfg = RunConfig(**kwargs, seed=int(d.get("seed", 0)), out=str(d.get("out", "runs")))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    t, lr, data = cfg.trainer, cfg.learner, cfg.data
    if t.rollout_horizon < 1:
        raise ConfigError("trainer.rollout_horizon must be >= 1")
    if not 0.0 <= t.mix_ratio <= 1.0:
        raise ConfigError("trainer.mix_ratio must lie in [0, 1]")
    if lr.lam < 0:
        raise ConfigError("learner.lam must be >= 0")
    if cfg.model.n_members < 2:
        raise ConfigError("model.n_members must be >= 2")
    if data.episodes < 1 or not data.behaviors:
        raise ConfigError("data needs episodes >= 1 and at least one behavior")
    if len(data.background) != 2:
        raise ConfigError("data.background is [mean, noise]")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")


def load(path: str | os.PathLike | None, env: dict | None = None) -> RunConfig:
    """Read a TOML config (``None`` means all defaults); ``PEMORL_SEED`` overrides ``seed``."""
    d = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return from_dict(d)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: RunConfig, directory: str | os.PathLike) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.resolved.toml")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash = {cfg.hash()}\n")
        fh.write(dumps(cfg))
    return path


__all__ = [
    "BaselineConfig", "ConfigError", "DataConfig", "LearnerConfig", "ModelConfig", "RunConfig", "TrainerConfig",
    "dumps", "from_dict", "load", "validate", "write_resolved",
]

"""Run configuration: five JSON sections, strict keys, defaults echoed back.

Environment overrides (applied by :func:`apply_env`):

    CRI_OUTPUT_DIR   default output directory for CLI commands
    CRI_SEED         run seed (``task.seed``)
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cluster import ClusterConfig
from .degrade import TASK_KINDS
from .errors import ConfigError
from .generator import GeneratorLayout
from .invert import MODES, LossWeights, StageSchedule

ENV_OUTPUT_DIR = "CRI_OUTPUT_DIR"
ENV_SEED = "CRI_SEED"
DEFAULT_OUTPUT_DIR = "cri_out"


@dataclass
class TaskConfig:
    task: str = "inpaint"
    scale: int = 4
    mask_fraction: float = 0.25
    mode: str = "cri"
    latent_space: str = "w+"
    degrade_centers: bool = False
    alpha: float | None = None  # None: half the median pairwise sample distance
    extractor_seed: int = 0
    seed: int = 0

    def validate(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task.task must be one of {sorted(TASK_KINDS)}, got {self.task!r}")
        if self.scale < 1:
            raise ConfigError(f"task.scale must be >= 1, got {self.scale}")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ConfigError(f"task.mask_fraction must lie in [0, 1), got {self.mask_fraction}")
        if self.mode not in MODES:
            raise ConfigError(f"task.mode must be one of {list(MODES)}, got {self.mode!r}")
        if self.latent_space not in ("w", "w+"):
            raise ConfigError(f"task.latent_space must be 'w' or 'w+', got {self.latent_space!r}")
        if self.alpha is not None and not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError(f"task.alpha must be >= 0 or null, got {self.alpha!r}")


SECTIONS = {
    "generator": GeneratorLayout,
    "cluster": ClusterConfig,
    "weights": LossWeights,
    "schedule": StageSchedule,
    "task": TaskConfig,
}


@dataclass
class Config:
    generator: GeneratorLayout = field(default_factory=GeneratorLayout)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    task: TaskConfig = field(default_factory=TaskConfig)

    def validate(self):
        for name in ("cluster", "weights", "schedule"):
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith(name + ".") else f"{name}: {msg}") from None
        g = self.generator
        for k in ("resolution", "layers", "d_z", "d_w", "classes", "modes", "hidden"):
            if getattr(g, k) < 1:
                raise ConfigError(f"generator.{k} must be >= 1")
        if g.d_z < 3:
            raise ConfigError("generator.d_z must be >= 3 (two dims carry the mode index)")
        self.task.validate()
        if self.task.task == "sr" and g.resolution % self.task.scale:
            raise ConfigError(f"task.scale {self.task.scale} does not divide generator.resolution {g.resolution}")
        return self

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def with_overrides(self, **sections):
        """Copy with per-section field overrides, e.g. ``weights={"lambda2": 0}``."""
        d = self.to_dict()
        for name, vals in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section {name!r}")
            d[name].update(vals)
        return from_dict(d)


def _coerce(section, key, default, value):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if default is None or isinstance(default, float):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        raw = d.get(name, {}) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be an object")
        defaults = {f.name: f.default for f in fields(cls)}
        bad = set(raw) - set(defaults)
        if bad:
            raise ConfigError(f"unknown key(s) in {name}: {', '.join(f'{name}.{k}' for k in sorted(bad))}")
        vals = {k: _coerce(name, k, defaults[k], v) for k, v in raw.items()}
        parts[name] = cls(**{**defaults, **vals})
    return Config(**parts).validate()


def load_config(path=None):
    """Read and validate a JSON config; a missing path or empty file gives all defaults."""
    if path is None:
        return Config().validate()
    text = Path(path).read_text()
    if not text.strip():
        return Config().validate()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(d)


def save_config(cfg: Config, path):
    Path(path).write_text(dumps(cfg))
    return Path(path)


def dumps(cfg: Config):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def apply_env(cfg: Config, environ=None):
    """Return ``cfg`` with ``CRI_SEED`` applied to the run seed, if set."""
    env = os.environ if environ is None else environ
    raw = env.get(ENV_SEED)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_SEED} must be an integer, got {raw!r}") from None
    return replace(cfg, task=replace(cfg.task, seed=seed))


def output_dir(cli_value=None, environ=None):
    """Explicit CLI value, else ``CRI_OUTPUT_DIR``, else ``./cri_out``."""
    env = os.environ if environ is None else environ
    return Path(cli_value or env.get(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR)

"""Run configuration: a TOML file with top-level keys and [data] [train] [sweep] [verify] sections.

Relative paths are resolved against the directory holding the config file.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml

from cfgrl.envs import MAPS

METHODS = ("cfgrl", "awr", "gcbc", "flow-gcbc", "bc", "flow-bc", "hgcbc", "hcfgrl")
# methods that need a learned value function
VALUE_METHODS = ("awr",)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def toml_loads(text: str) -> dict:
    return _toml.loads(text)


@dataclass
class DataConfig:
    behavior: str = "noisy_expert"
    epsilons: list = field(default_factory=lambda: [0.5])
    episodes: int = 300


@dataclass
class TrainConfig:
    methods: list = field(default_factory=lambda: ["cfgrl"])
    # "goal": value-free goal guidance; "optimality": advantage labels from learned values
    conditioning: str = "goal"
    steps: int = 20000
    value_steps: int = 20000
    batch_size: int = 256
    widths: list = field(default_factory=lambda: [64, 64])
    activation: str = "gelu"
    lr: float = 3e-4
    expectile: float = 0.9
    discount: float = 0.99
    smoothing: float = 0.005
    dropout: float = 0.1
    gcbc_dropout: float = 0.0
    subgoal_steps: int = 5
    awr_inv_temps: list = field(default_factory=lambda: [1.0, 3.0, 10.0, 30.0])
    awr_clip: float = 100.0
    goal_sampler: str = "geometric"
    architecture: str = "shared"
    embed_dim: int = 8
    log_every: int = 100


@dataclass
class SweepConfig:
    weights: list = field(default_factory=lambda: [0.0, 1.0, 1.5, 2.0, 3.0])
    episodes: int = 250
    flow_steps: int = 16
    low_weight: float | None = None
    svg: bool = True
    workers: int = 1


@dataclass
class VerifyConfig:
    instances: int = 100
    discount: float = 0.9
    max_states: int = 6
    max_actions: int = 5
    chebyshev_instances: int = 1000
    identity_instances: int = 50
    attenuation_weights: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0])
    goal_weights: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0])
    exp_clip: float = 20.0


@dataclass
class RunConfig:
    env: str = "pointmaze-small"
    map_file: str | None = None
    dataset: str | None = None
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    eval_seed: int = 12345
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    @property
    def dataset_path(self) -> Path | None:
        return self.path(self.dataset)


_SECTIONS = {"data": DataConfig, "train": TrainConfig, "sweep": SweepConfig, "verify": VerifyConfig}


def _fill(cls, raw: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names or key == "base_dir" or key in _SECTIONS and cls is RunConfig:
            raise ConfigError(f"{prefix}{key}", "unknown key")
        kwargs[key] = value
    return cls(**kwargs)


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(key, msg)


def _nums(values, key):
    _require(isinstance(values, list) and len(values) > 0, key, "must be a non-empty list")
    for v in values:
        _require(isinstance(v, (int, float)) and not isinstance(v, bool), key, f"non-numeric entry {v!r}")
    return [float(v) for v in values]


def validate(cfg: RunConfig) -> RunConfig:
    _require(cfg.env in MAPS, "env", f"unknown environment {cfg.env!r}; known: {sorted(MAPS)}")
    if cfg.map_file is not None:
        _require(cfg.path(cfg.map_file).is_file(), "map_file", f"file not found: {cfg.map_file}")
    _require(isinstance(cfg.seeds, list) and cfg.seeds and all(isinstance(s, int) and s >= 0 for s in cfg.seeds),
             "seeds", "must be a non-empty list of non-negative integers")

    d = cfg.data
    _require(d.behavior in ("noisy_expert", "random"), "data.behavior", "must be noisy_expert or random")
    d.epsilons = _nums(d.epsilons, "data.epsilons")
    _require(all(0.0 <= e <= 1.0 for e in d.epsilons), "data.epsilons", "entries must lie in [0, 1]")
    _require(isinstance(d.episodes, int) and d.episodes >= 1, "data.episodes", "must be an integer >= 1")

    t = cfg.train
    _require(isinstance(t.methods, list) and t.methods and all(m in METHODS for m in t.methods),
             "train.methods", f"entries must be among {METHODS}")
    _require(t.conditioning in ("goal", "optimality"), "train.conditioning", "must be goal or optimality")
    for key in ("steps", "value_steps", "batch_size", "subgoal_steps", "embed_dim", "log_every"):
        v = getattr(t, key)
        _require(isinstance(v, int) and v >= 1, f"train.{key}", "must be an integer >= 1")
    _require(isinstance(t.widths, list) and t.widths and all(isinstance(w, int) and w >= 1 for w in t.widths),
             "train.widths", "must be a list of positive integers")
    _require(t.activation in ("gelu", "mish"), "train.activation", "must be gelu or mish")
    _require(t.lr > 0, "train.lr", "must be positive")
    _require(0.0 < t.expectile < 1.0, "train.expectile", "must lie in (0, 1)")
    _require(0.0 < t.discount < 1.0, "train.discount", "must lie in (0, 1)")
    _require(0.0 < t.smoothing <= 1.0, "train.smoothing", "must lie in (0, 1]")
    _require(0.0 <= t.dropout <= 1.0, "train.dropout", "must lie in [0, 1]")
    _require(0.0 <= t.gcbc_dropout <= 1.0, "train.gcbc_dropout", "must lie in [0, 1]")
    t.awr_inv_temps = _nums(t.awr_inv_temps, "train.awr_inv_temps")
    _require(all(b >= 0 for b in t.awr_inv_temps), "train.awr_inv_temps", "entries must be >= 0")
    _require(t.awr_clip > 0, "train.awr_clip", "must be positive")
    _require(t.goal_sampler in ("geometric", "uniform"), "train.goal_sampler", "must be geometric or uniform")
    _require(t.architecture in ("shared", "separate"), "train.architecture", "must be shared or separate")

    s = cfg.sweep
    s.weights = _nums(s.weights, "sweep.weights")
    _require(all(w >= 0 for w in s.weights), "sweep.weights", "entries must be >= 0")
    _require(isinstance(s.episodes, int) and s.episodes >= len(cfg.seeds), "sweep.episodes",
             "must be an integer >= number of seeds")
    _require(isinstance(s.flow_steps, int) and s.flow_steps >= 1, "sweep.flow_steps", "must be an integer >= 1")
    _require(s.low_weight is None or s.low_weight >= 0, "sweep.low_weight", "must be >= 0")
    _require(isinstance(s.workers, int) and s.workers >= 1, "sweep.workers", "must be an integer >= 1")

    v = cfg.verify
    for key in ("instances", "max_states", "max_actions", "chebyshev_instances", "identity_instances"):
        val = getattr(v, key)
        _require(isinstance(val, int) and val >= 1, f"verify.{key}", "must be an integer >= 1")
    _require(0.0 < v.discount < 1.0, "verify.discount", "must lie in (0, 1)")
    v.attenuation_weights = _nums(v.attenuation_weights, "verify.attenuation_weights")
    v.goal_weights = _nums(v.goal_weights, "verify.goal_weights")
    for key, ws in (("attenuation_weights", v.attenuation_weights), ("goal_weights", v.goal_weights)):
        _require(all(w >= 0 for w in ws) and ws == sorted(ws), f"verify.{key}", "must be ascending and >= 0")
    _require(v.exp_clip > 0, "verify.exp_clip", "must be positive")
    return cfg


def from_dict(raw: dict, base_dir=None) -> RunConfig:
    raw = dict(raw)
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.pop(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(name, "must be a table")
        sections[name] = _fill(cls, sub, f"{name}.")
    top = _fill(RunConfig, raw, "")
    for name, obj in sections.items():
        setattr(top, name, obj)
    top.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    return validate(top)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = toml_loads(path.read_text())
    except _toml.TOMLDecodeError as exc:
        raise ConfigError("--config", f"malformed TOML ({exc})") from exc
    return from_dict(raw, base_dir=path.parent.resolve())


def as_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out.pop("base_dir", None)
    return out

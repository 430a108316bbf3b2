"""Run configuration: JSON file, validated before anything runs."""

import json
from dataclasses import asdict, dataclass, field, fields

from .cf import METHODS, REFERENCES
from .data import SyntheticSpec
from .dgp import TrainConfig
from .errors import ConfigError
from .evaluation import ExperimentConfig, ModelSettings, SplitConfig


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _model(data, where, default_lags):
    data = dict(data or {})
    data.setdefault("lags", default_lags)
    train = _strict(TrainConfig, data.pop("train", {}), f"{where}.train")
    return _strict(ModelSettings, dict(data, train=train), where)


@dataclass
class RunConfig:
    data: str = None
    truth: str = None
    synthetic: dict = None
    T: int = 12
    delta_t: float = 1.0 / 12.0
    strict: bool = True
    allow_negative: bool = False
    target: str = None
    methods: list = field(default_factory=lambda: list(METHODS))
    reference: str = "window_end"
    r_min: float = 0.0
    min_support: int = 24
    split: dict = field(default_factory=dict)
    fast_model: dict = field(default_factory=dict)
    slow_model: dict = field(default_factory=dict)
    num_samples: int = 200
    epsilon: float = 1e-3
    seed: int = 0
    out: str = "out"
    threads: int = 1

    def validate(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be a positive integer")
        if not self.delta_t > 0:
            raise ConfigError("delta_t must be positive")
        bad = sorted(set(self.methods) - set(METHODS))
        if bad or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {list(METHODS)}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"reference must be one of {list(REFERENCES)}")
        if self.num_samples < 1 or self.min_support < 2 or self.epsilon < 0 or self.threads < 1:
            raise ConfigError("num_samples, min_support, epsilon and threads are out of range")
        if self.r_min < 0 or self.r_min > 1:
            raise ConfigError("r_min must lie in [0, 1]")
        if self.data is not None and self.synthetic is not None:
            raise ConfigError("give either data or synthetic, not both")
        self.synthetic_spec()
        self.experiment("placeholder")
        return self

    def synthetic_spec(self):
        if self.synthetic is None:
            return None
        spec = _strict(SyntheticSpec, self.synthetic, "synthetic")
        spec.validate()
        return spec

    def experiment(self, target=None):
        target = target or self.target
        if target is None:
            raise ConfigError("a target node is required")
        return ExperimentConfig(
            target=target,
            methods=tuple(self.methods),
            split=_strict(SplitConfig, self.split, "split"),
            fast=_model(self.fast_model, "fast_model", 0),
            slow=_model(self.slow_model, "slow_model", 1),
            reference=self.reference,
            r_min=self.r_min,
            min_support=self.min_support,
            num_samples=self.num_samples,
            epsilon=self.epsilon,
            seed=self.seed,
        )

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def load_config(path=None, overrides=None):
    """Config from ``path`` (JSON) with non-None ``overrides`` applied on top.

    A ``data`` override replaces any synthetic input named in the file.
    """
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = _strict(RunConfig, data, "config")
    overrides = overrides or {}
    if overrides.get("data") is not None:
        cfg.synthetic = None
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()

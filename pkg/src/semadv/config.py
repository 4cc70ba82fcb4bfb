"""Validated run configuration, parsed from JSON.

Every section is a dataclass; unknown keys are rejected and each invariant
violation raises :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(name, msg)


def _choice(value, options, name):
    _require(value in options, name, f"must be one of {sorted(options)}, got {value!r}")


@dataclass
class DataConfig:
    K: int = 4
    n: int = 1200
    H: int = 16
    W: int = 16
    C: int = 1
    test_fraction: float = 0.25

    def validate(self, prefix="data"):
        _require(self.K >= 2, f"{prefix}.K", "need at least 2 classes")
        _require(self.n >= self.K, f"{prefix}.n", "need at least one image per class")
        _require(self.H >= 8 and self.W >= 8, f"{prefix}.H", "images must be at least 8x8")
        _require(self.H % 4 == 0 and self.W % 4 == 0, f"{prefix}.H", "size must be divisible by 4")
        _choice(self.C, {1, 3}, f"{prefix}.C")
        _require(0 < self.test_fraction < 1, f"{prefix}.test_fraction", "must lie in (0, 1)")


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self, prefix="schedule"):
        _require(self.T >= 1, f"{prefix}.T", "must be positive")
        _require(0 < self.beta_start <= self.beta_end < 1, f"{prefix}.beta_start",
                 "need 0 < beta_start <= beta_end < 1")


@dataclass
class DenoiserTrainConfig:
    width: int = 32
    steps: int = 2000
    batch: int = 32
    lr: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0

    def validate(self, prefix="denoiser"):
        _require(self.width >= 4, f"{prefix}.width", "must be at least 4")
        _require(self.steps >= 1, f"{prefix}.steps", "must be positive")
        _require(self.batch >= 1, f"{prefix}.batch", "must be positive")
        _require(self.lr > 0, f"{prefix}.lr", "must be positive")
        _choice(self.optimizer, {"sgd", "adam"}, f"{prefix}.optimizer")


@dataclass
class ClassifierTrainConfig:
    width: int = 16
    epochs: int = 10
    lr: float = 3e-3
    batch: int = 32
    optimizer: str = "adam"
    label_smoothing: float = 0.1
    seed: int = 0

    def validate(self, prefix="classifier"):
        _require(self.width >= 2, f"{prefix}.width", "must be at least 2")
        _require(self.epochs >= 1, f"{prefix}.epochs", "must be positive")
        _require(self.lr > 0, f"{prefix}.lr", "must be positive")
        _require(self.batch >= 1, f"{prefix}.batch", "must be positive")
        _choice(self.optimizer, {"sgd", "adam"}, f"{prefix}.optimizer")
        _require(0 <= self.label_smoothing < 1, f"{prefix}.label_smoothing", "must be in [0, 1)")


def _default_classifiers() -> dict:
    # target and extractor share an architecture but not a seed; surrogate and
    # victim differ in width as well
    return {
        "target": ClassifierTrainConfig(width=16, seed=1),
        "surrogate": ClassifierTrainConfig(width=24, seed=2),
        "extractor": ClassifierTrainConfig(width=16, seed=3),
        "victim": ClassifierTrainConfig(width=12, seed=4),
    }


@dataclass
class STConfig:
    lam: float = 1.0
    mode: str = "both"
    box: str = "white"
    s_df: int = 40
    s_ft: int = 15
    s_sp: int = 40
    max_rounds: int = 15
    extension_blocks: int = 10
    lr_latent: float = 0.05
    lr_model: float = 1e-5
    optimizer: str = "adam"
    encoding: str = "invert"
    init_noise: float = 0.25
    restart: bool = True
    seed: int = 0

    def validate(self, prefix="st"):
        _require(self.lam > 0, f"{prefix}.lambda", "must be positive")
        _choice(self.mode, {"latent", "model", "both"}, f"{prefix}.mode")
        _choice(self.box, {"white", "black"}, f"{prefix}.box")
        for name in ("s_df", "s_ft", "s_sp", "max_rounds"):
            _require(getattr(self, name) >= 1, f"{prefix}.{name}", "must be positive")
        _require(self.s_ft <= self.s_sp, f"{prefix}.s_ft", "must not exceed s_sp")
        _require(self.extension_blocks >= 0, f"{prefix}.extension_blocks", "must be >= 0")
        _require(self.lr_latent > 0, f"{prefix}.lr_latent", "must be positive")
        _require(self.lr_model > 0, f"{prefix}.lr_model", "must be positive")
        _choice(self.optimizer, {"sgd", "adam"}, f"{prefix}.optimizer")
        _choice(self.encoding, {"invert", "stochastic"}, f"{prefix}.encoding")
        _require(self.init_noise >= 0, f"{prefix}.init_noise", "must be >= 0")


@dataclass
class LMConfig:
    strategy: str = "sum"
    method: str = "gradcam"
    gamma: float = 10.0
    delta_init: float = 100.0
    s_df: int = 40
    s_sp: int = 40
    encoding: str = "invert"
    search: str = "first"
    seed: int = 0

    def validate(self, prefix="lm"):
        _choice(self.strategy, {"source", "target", "sum"}, f"{prefix}.strategy")
        _choice(self.method, {"gradcam", "simplefullgrad"}, f"{prefix}.method")
        _require(self.gamma > 0, f"{prefix}.gamma", "must be positive")
        _require(0 < self.delta_init <= 100, f"{prefix}.delta_init", "must lie in (0, 100]")
        _require(self.s_df >= 1, f"{prefix}.s_df", "must be positive")
        _require(self.s_sp >= 1, f"{prefix}.s_sp", "must be positive")
        _choice(self.encoding, {"invert", "stochastic"}, f"{prefix}.encoding")
        _choice(self.search, {"first", "smallest"}, f"{prefix}.search")


@dataclass
class CampaignConfig:
    n_images: int = 50
    settings: list = field(default_factory=lambda: ["st", "lm"])
    jobs: int = 1

    def validate(self, prefix="campaign"):
        _require(self.n_images >= 1, f"{prefix}.n_images", "a campaign needs at least one attack")
        _require(len(self.settings) >= 1, f"{prefix}.settings", "no attack settings given")
        for s in self.settings:
            _choice(s, {"st", "lm"}, f"{prefix}.settings")
        _require(self.jobs >= 1, f"{prefix}.jobs", "must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    classifiers: dict = field(default_factory=_default_classifiers)
    st: STConfig = field(default_factory=STConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)

    def validate(self):
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        self.data.validate()
        self.schedule.validate()
        self.denoiser.validate()
        for role in ("target", "surrogate", "extractor", "victim"):
            _require(role in self.classifiers, f"classifiers.{role}", "missing")
        for role, c in self.classifiers.items():
            _choice(role, {"target", "surrogate", "extractor", "victim"}, "classifiers")
            c.validate(f"classifiers.{role}")
        self.st.validate()
        self.lm.validate()
        _require(self.st.s_sp <= self.schedule.T, "st.s_sp", "more steps than timesteps")
        _require(self.lm.s_sp <= self.schedule.T, "lm.s_sp", "more steps than timesteps")
        self.campaign.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["st"]["lambda"] = d["st"].pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_ALIASES = {"lambda": "lam"}


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
        kwargs[name] = value
    return cls(**kwargs)


def _from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    sections = {
        "data": DataConfig,
        "schedule": ScheduleConfig,
        "denoiser": DenoiserTrainConfig,
        "st": STConfig,
        "lm": LMConfig,
        "campaign": CampaignConfig,
    }
    kwargs: dict[str, Any] = {}
    for key in raw:
        if key not in sections and key not in ("seed", "classifiers"):
            raise ConfigError(key, "unknown key")
    seed = raw.get("seed", 0)
    kwargs["seed"] = seed
    for key, cls in sections.items():
        sub = raw.get(key, {})
        if key in ("st", "lm") and "seed" not in sub:
            sub = {**sub, "seed": seed}
        kwargs[key] = _build(cls, sub, key)
    classifiers = _default_classifiers()
    raw_cls = raw.get("classifiers", {})
    if not isinstance(raw_cls, dict):
        raise ConfigError("classifiers", "expected an object")
    for role, sub in raw_cls.items():
        if role not in classifiers:
            raise ConfigError(f"classifiers.{role}", "unknown key")
        base = dataclasses.asdict(classifiers[role])
        classifiers[role] = _build(ClassifierTrainConfig, {**base, **sub}, f"classifiers.{role}")
    kwargs["classifiers"] = classifiers
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as e:
        raise ConfigError("config", str(e)) from None
    return cfg.validate()


def parse_config(source: str | os.PathLike | dict | None = None) -> RunConfig:
    """Parse and validate a run configuration.

    ``source`` may be a path to a JSON file, a JSON string, an already-decoded
    dict, or None for all defaults.
    """
    if source is None:
        return RunConfig().validate()
    if isinstance(source, dict):
        return _from_dict(source)
    text = str(source)
    if isinstance(source, os.PathLike) or (not text.lstrip().startswith("{") and os.path.exists(text)):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"parse error at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return _from_dict(raw)

"""Run configuration: one JSON document with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

OUTPUT_ROOT_ENV = "TTHLAB_OUT"


@dataclass
class WorldConfig:
    n_train: int = 3000
    n_val: int = 100
    n_test: int = 100
    flavor: str = "alpha"
    surrogate_flavor: str = "beta"
    image_size: int = 64
    grid: int = 4
    max_objects: int = 3
    captions_per_image: int = 5
    subset_caption_rate: float = 0.1
    max_caption_tokens: int = 12
    n_benign: int = 20


@dataclass
class ModelConfig:
    d: int = 64
    d_e: int = 64
    pool_factor: int = 4
    lr: float = 1.0
    epochs: int = 60
    batch: int = 64
    temperature: float = 0.07
    hidden: int = 128


@dataclass
class AttackParams:
    lam: float = 0.3
    eta: float = 0.01
    iters: int = 300
    ratio: float = 0.1
    m: int = 500
    placement: str = "top-right"
    payload_hex: str = "54726f6a616e"
    beacon_k: int = 8


@dataclass
class EvalParams:
    k: int = 10
    keywords: list = field(default_factory=list)  # empty: auto-select
    per_pos: int = 8
    lambdas: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 1.0, 10.0])
    ratios: list = field(default_factory=lambda: [0.02, 0.05, 0.1, 0.15, 0.2])
    ablation_keywords: list = field(default_factory=list)  # empty: first four selected
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])
    dump_rankings: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    models: dict = field(default_factory=lambda: {"A": ModelConfig(), "B": ModelConfig()})
    attack: AttackParams = field(default_factory=AttackParams)
    eval: EvalParams = field(default_factory=EvalParams)
    out: str = ""

    def output_root(self) -> Path:
        if self.out:
            return Path(self.out)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "tthlab-out"))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, output path excluded."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            models = {arch: _build(ModelConfig, m) for arch, m in d.pop("models", {}).items()}
            cfg = cls(
                world=_build(WorldConfig, d.pop("world", {})),
                attack=_build(AttackParams, d.pop("attack", {})),
                eval=_build(EvalParams, d.pop("eval", {})),
                **d,
            )
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        if models:
            cfg.models = {**cfg.models, **models}
        cfg.validate()
        return cfg

    def validate(self):
        for arch in self.models:
            if arch not in ("A", "B"):
                raise ConfigError(f"unknown model arch {arch!r}")
        if self.world.flavor == self.world.surrogate_flavor:
            raise ConfigError("surrogate flavor must differ from the evaluation flavor")
        if self.attack.lam < 0 or self.attack.eta <= 0 or self.attack.iters < 0:
            raise ConfigError("attack needs lam >= 0, eta > 0 and iters >= 0")
        if not 0 < self.attack.ratio < 1:
            raise ConfigError("patch ratio must be in (0, 1)")
        if self.eval.k < 1 or self.attack.m < 1:
            raise ConfigError("k and m must be positive")
        if any(lam < 0 for lam in self.eval.lambdas):
            raise ConfigError("lambda grid values must be >= 0")


def _build(kind, values):
    if dataclasses.is_dataclass(values):
        return values
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**values)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON config (defaults when ``path`` is None) and apply ``key=value`` overrides."""
    data = RunConfig().to_dict()
    if path is not None:
        try:
            data = _merge(data, json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    for item in overrides:
        apply_override(data, item)
    return RunConfig.from_dict(data)


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for key, val in upd.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def apply_override(data: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; values parse as JSON, else stay strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"override path {path!r} does not name a config section")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = value

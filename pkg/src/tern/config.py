"""Dataclass configs and the JSON/``--set`` override machinery."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class TernConfig:
    d_r: int = 2048
    d_visual: int = 2048
    d_text: int = 768
    d_common: int = 1024
    n_visual_te: int = 4
    n_text_te: int = 0
    n_shared_te: int = 2
    d_ff: int = 2048
    dropout: float = 0.1
    heads: int = 4
    max_regions: int = 36
    max_tokens: int = 64
    vocab_size: int = 30000
    geometry_mode: str = "conventional"

    def validate(self) -> "TernConfig":
        for name in ("d_r", "d_visual", "d_text", "d_common", "d_ff", "heads",
                     "max_regions", "max_tokens", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        for name in ("n_visual_te", "n_text_te", "n_shared_te"):
            if getattr(self, name) < 0:
                raise ConfigError(f"model.{name} must be non-negative")
        for name in ("d_common", "d_visual", "d_text"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"model.{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if self.geometry_mode not in ("conventional", "paper-literal"):
            raise ConfigError(f"model.geometry_mode must be 'conventional' or 'paper-literal', got {self.geometry_mode!r}")
        return self


@dataclass
class TrainConfig:
    alpha: float = 0.2
    batch_size: int = 32
    epochs: int = 30
    lr: float = 2e-5
    seed: int = 0
    loss_reduction: str = "sum"
    # skip in-batch negatives that belong to the same image as the positive
    exclude_same_image: bool = True
    checkpoint_every: int = 1

    def validate(self) -> "TrainConfig":
        if self.alpha <= 0:
            raise ConfigError("train.alpha must be > 0")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError("train.loss_reduction must be 'sum' or 'mean'")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")
        return self


@dataclass
class EvalConfig:
    p: int = 25
    ks: tuple = (1, 5, 10)
    rouge_beta: float = 1.2
    tau_aggregation: str = "max"

    def validate(self) -> "EvalConfig":
        if self.p < 1:
            raise ConfigError("eval.p must be >= 1")
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks must be non-empty and >= 1")
        if self.rouge_beta <= 0:
            raise ConfigError("eval.rouge_beta must be > 0")
        if self.tau_aggregation not in ("max", "mean"):
            raise ConfigError("eval.tau_aggregation must be 'max' or 'mean'")
        return self


@dataclass
class PathsConfig:
    features: str = "features.jsonl"
    captions: str = "captions.jsonl"
    splits: str = "splits.json"
    relevance: str | None = None
    checkpoints: str = "checkpoints"
    output_dir: str = "runs"


@dataclass
class RunConfig:
    model: TernConfig = field(default_factory=TernConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    precision: str = "float32"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be 'float32' or 'float64'")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval"]["ks"] = list(d["eval"]["ks"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def desk(cls, data_dir=".", output_dir="runs") -> "RunConfig":
        """Small model that trains in seconds on one CPU core, for synthetic data from ``tern gen``.

        Dropout is off: with in-batch hard negatives and tiny batches some
        seeds collapse onto a constant caption embedding when it is on.
        """
        d = Path(data_dir)
        return cls(
            model=TernConfig(d_r=32, d_visual=64, d_text=64, d_common=64, n_visual_te=1,
                             n_text_te=0, n_shared_te=1, d_ff=128, heads=4, dropout=0.0,
                             max_tokens=32),
            train=TrainConfig(batch_size=32, epochs=160, lr=1e-3),
            paths=PathsConfig(features=str(d / "features.jsonl"), captions=str(d / "captions.jsonl"),
                              splits=str(d / "splits.json"), output_dir=str(output_dir)),
        ).validate()


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _section_type(cls, name)
        kwargs[name] = _build(sub, value, f"{prefix}{name}.") if sub else value
    return cls(**kwargs)


_SECTIONS = {"model": TernConfig, "train": TrainConfig, "eval": EvalConfig, "paths": PathsConfig}


def _section_type(cls, name):
    return _SECTIONS.get(name) if cls is RunConfig else None


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings with dotted keys, e.g. ``train.lr=1e-3``.

    Values are parsed as JSON when possible, else kept as strings.
    """
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)

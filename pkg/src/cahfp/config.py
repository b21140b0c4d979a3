"""Experiment configuration: JSON documents validated into a dataclass."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .pruning import CRITERIA, RANK_RATIOS

CRITERION_CHOICES = CRITERIA + ("none",)
RECONSTRUCTION_CHOICES = ("on", "off", "renormalize")
CURVATURE_METHODS = ("empirical_fisher", "fd_oracle")
SCORE_GRADIENTS = ("proxy", "exact")

_DATASET_KEYS = {
    "synthetic": {"kind", "num_classes", "dim", "per_class", "class_sep", "holdout"},
    "idx": {"kind", "images", "labels", "num_classes", "holdout", "limit"},
}


def default_dataset():
    return {"kind": "synthetic", "num_classes": 10, "dim": 32, "per_class": 300, "class_sep": 3.0, "holdout": 0.2}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=default_dataset)
    K: int = 10
    alpha: float = 1.0
    rank: int | None = 2
    ratios: list | None = None
    architecture: dict | None = None
    criterion: str = "curvature"
    reconstruction: str = "on"
    E: int | None = None  # None: one local epoch
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    rounds: int = 300
    warmup_rounds: int = 5
    mask_hold_interval: int = 1
    diagnostics_interval: int = 10
    sigma_batches: int = 4
    min_shard: int | None = None
    curvature_beta: float = 0.9
    curvature_method: str = "empirical_fisher"
    score_gradient: str = "proxy"
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, key=key)

        ds = self.dataset
        need(isinstance(ds, dict), "dataset", "must be an object")
        kind = ds.get("kind", "synthetic")
        need(kind in _DATASET_KEYS, "dataset.kind", f"unknown dataset kind {kind!r}")
        merged = default_dataset() if kind == "synthetic" else {"kind": "idx", "holdout": 0.2}
        for k in ds:
            need(k in _DATASET_KEYS[kind], f"dataset.{k}", "unknown key")
        merged.update(ds)
        self.dataset = merged
        if kind == "idx":
            need("images" in merged and "labels" in merged, "dataset", "idx data needs 'images' and 'labels'")
        else:
            need(merged["num_classes"] >= 2, "dataset.num_classes", "must be at least 2")
            need(merged["dim"] >= 2, "dataset.dim", "must be at least 2")
            need(merged["per_class"] >= 1, "dataset.per_class", "must be positive")
        need(0 <= merged["holdout"] < 1, "dataset.holdout", "must lie in [0, 1)")

        need(isinstance(self.K, int) and self.K >= 1, "K", "must be a positive integer")
        need(self.alpha > 0, "alpha", "must be positive")
        if self.ratios is not None:
            need(len(self.ratios) == self.K, "ratios", f"needs {self.K} entries")
            need(all(0 <= r < 1 for r in self.ratios), "ratios", "entries must lie in [0, 1)")
        else:
            need(self.rank in RANK_RATIOS, "rank", "must be 0-3 when no explicit ratios are given")
            need(self.K == 10, "rank", f"rank presets are defined for K=10, got K={self.K}; give explicit ratios")
        need(self.criterion in CRITERION_CHOICES, "criterion", f"unknown criterion {self.criterion!r}")
        if isinstance(self.reconstruction, bool):
            self.reconstruction = "on" if self.reconstruction else "off"
        need(self.reconstruction in RECONSTRUCTION_CHOICES, "reconstruction",
             f"unknown mode {self.reconstruction!r}")
        need(self.E is None or (isinstance(self.E, int) and self.E >= 1), "E", "must be null (one epoch) or >= 1")
        need(self.lr > 0, "lr", "must be positive")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size", "must be a positive integer")
        need(isinstance(self.rounds, int) and self.rounds >= 0, "rounds", "must be a non-negative integer")
        need(self.warmup_rounds >= 0, "warmup_rounds", "must be non-negative")
        need(self.mask_hold_interval >= 1, "mask_hold_interval", "must be at least 1")
        need(self.diagnostics_interval >= 0, "diagnostics_interval", "must be non-negative (0 disables)")
        need(self.sigma_batches >= 2, "sigma_batches", "must be at least 2")
        need(self.min_shard is None or self.min_shard >= 1, "min_shard", "must be positive")
        need(0 <= self.curvature_beta < 1, "curvature_beta", "must lie in [0, 1)")
        need(self.curvature_method in CURVATURE_METHODS, "curvature_method", "unknown method")
        need(self.score_gradient in SCORE_GRADIENTS, "score_gradient", "must be 'proxy' or 'exact'")
        need(isinstance(self.seed, int), "seed", "must be an integer")

    @property
    def effective_min_shard(self):
        return self.min_shard if self.min_shard is not None else max(1, self.batch_size)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_FIELDS = {f.name for f in fields(ExperimentConfig)}


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    for k in d:
        if k not in _FIELDS:
            raise ConfigError("unknown key", key=k)
    if "ratios" in d and d["ratios"] is not None and "rank" not in d:
        d = {**d, "rank": None}
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text):
    try:
        d = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(d)

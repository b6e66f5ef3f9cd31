"""Flat run configuration shared by every CLI command.

A config file is a flat JSON object whose keys are the field names of
:class:`RunConfig`; unknown keys are rejected.  ``--set key=value`` flags
override individual fields (values are parsed as JSON when possible).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .classifier import GbtConfig
from .denoiser import TrainConfig
from .diffusion import DiffusionConfig
from .errors import ConfigurationError
from .evaluation import AUG_MODES, DenoiserShape, PipelineConfig


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus_dir: str = ""
    workers: int = 1
    # corpus
    n_benign: int = 24
    n_malignant: int = 36
    wsi_size: int = 128
    patch_size: int = 32
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"
    # denoiser training
    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 32
    weight_vlb: float = 0.0
    base_channels: int = 16
    blocks_per_level: int = 2
    levels: int = 2
    embed_dim: int = 32
    # classifier
    feature_kind: str = "stats"
    n_trees: int = 100
    max_depth: int = 3
    gbt_learning_rate: float = 0.1
    reg_lambda: float = 1.0
    base_score: float = 0.0
    # augmentation and fusion
    augmentation: str = "diffusion"
    modes: list = field(default_factory=lambda: ["affine", "diffusion"])
    aug_count: int = 1000
    retain_fraction: float = 1.0
    importance_kind: str = "uniform"
    importance_file: str = ""
    threshold: float = 0.25
    # cross-validation
    k: int = 5
    repeats: int = 10

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must lie in [0, 1], got {self.threshold}")
        for m in list(self.modes) + [self.augmentation]:
            if m not in AUG_MODES:
                raise ConfigurationError(f"unknown augmentation mode {m!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        for mode in self.modes:
            self.pipeline(mode).validate()

    @property
    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else Path(self.out) / "corpus"

    def diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(self.T, self.beta_start, self.beta_end, self.schedule_kind)

    def train(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed, self.weight_vlb)

    def denoiser(self) -> DenoiserShape:
        return DenoiserShape(self.base_channels, self.blocks_per_level, self.levels, self.embed_dim)

    def gbt(self) -> GbtConfig:
        return GbtConfig(self.n_trees, self.max_depth, self.gbt_learning_rate, self.reg_lambda,
                         self.base_score)

    def pipeline(self, mode: str) -> PipelineConfig:
        return PipelineConfig(augmentation=mode, aug_count=self.aug_count,
                              retain_fraction=self.retain_fraction, feature_kind=self.feature_kind,
                              importance_kind=self.importance_kind, threshold=self.threshold,
                              gbt=self.gbt(), diffusion=self.diffusion(), train=self.train(),
                              denoiser=self.denoiser())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = getattr(RunConfig(), name)
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, int):
            return value
    elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    elif isinstance(default, str) and isinstance(value, str):
        return value
    elif isinstance(default, list):
        if isinstance(value, str):
            return [v for v in value.split(",") if v]
        if isinstance(value, list):
            return value
    raise ConfigurationError(f"config key {name!r}: cannot use {value!r}")


def apply_overrides(cfg: RunConfig, items: dict) -> RunConfig:
    for key, value in items.items():
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def parse_assignment(text: str) -> tuple:
    if "=" not in text:
        raise ConfigurationError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        body = json.loads(p.read_text())
        if not isinstance(body, dict):
            raise ConfigurationError(f"{p}: config must be a flat JSON object")
        apply_overrides(cfg, body)
    apply_overrides(cfg, overrides or {})
    cfg.validate()
    return cfg

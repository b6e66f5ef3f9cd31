"""Repeated stratified k-fold evaluation of the augment / classify / fuse pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .classifier import GbtConfig, feature_matrix, gbt_train
from .denoiser import DenoiserArch, DenoiserModel, TrainConfig, train
from .diffusion import DiffusionConfig, make_schedule
from .errors import ConfigurationError, ContractError, LeakageError
from .fusion import (
    IMPORTANCE_THRESHOLD, Metrics, WsiPrediction, compute_metrics, importance_provider,
)
from .patches import (
    BENIGN, MALIGNANT, TRAIN_ONLY, Corpus, affine_augment, diffusion_augment,
    patches_to_model_input, tile_wsi,
)

log = logging.getLogger(__name__)

AUG_MODES = ("none", "affine", "diffusion")
MODE_TITLES = {"affine": "Affine", "diffusion": "DPM", "none": "None"}
METRIC_ROWS = (("accuracy", "Accuracy"), ("sensitivity", "Sensitivity"), ("specificity", "Specificity"))


@dataclass
class DenoiserShape:
    base_channels: int = 16
    blocks_per_level: int = 2
    levels: int = 2
    embed_dim: int = 32


@dataclass
class PipelineConfig:
    augmentation: str = "none"
    aug_count: int = 1000
    retain_fraction: float = 1.0
    feature_kind: str = "stats"
    importance_kind: str = "uniform"
    threshold: float = IMPORTANCE_THRESHOLD
    gbt: GbtConfig = field(default_factory=GbtConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoiser: DenoiserShape = field(default_factory=DenoiserShape)

    def validate(self) -> None:
        if self.augmentation not in AUG_MODES:
            raise ConfigurationError(f"unknown augmentation mode {self.augmentation!r}")
        if self.augmentation == "diffusion" and self.aug_count % 2:
            raise ConfigurationError("diffusion augmentation count must be even")
        if self.aug_count < 0 or not 0.0 < self.retain_fraction <= 1.0:
            raise ConfigurationError("aug_count must be >= 0 and retain_fraction in (0, 1]")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError("fusion threshold must lie in [0, 1]")
        self.gbt.validate()
        self.diffusion.validate()
        self.train.validate()

    @property
    def needs_denoiser(self) -> bool:
        return self.augmentation == "diffusion" or self.feature_kind == "denoiser-encoder"


# ---------------------------------------------------------------------------
# splitting


def job_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def stratified_folds(labels: Sequence[int], k: int, seed: int) -> np.ndarray:
    """Fold id per item; each class is shuffled and dealt round-robin.

    The deal continues across classes, so fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for cls in (BENIGN, MALIGNANT):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ContractError(f"class {cls:+d} has {idx.size} WSIs, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    return folds


# ---------------------------------------------------------------------------
# classifiers


class GbtPatchClassifier:
    """Default patch classifier: boosted trees on extracted features."""

    def __init__(self, cfg: GbtConfig):
        self.cfg = cfg
        self.model = None

    def fit(self, X, y, patches):
        self.model = gbt_train(X, y, self.cfg)
        return self

    def decision(self, X, patches) -> np.ndarray:
        return self.model.decision_function(X)


def check_no_leakage(test_patches, test_ids) -> None:
    test_ids = set(test_ids)
    for p in test_patches:
        if p.origin != "real" or p.fold == TRAIN_ONLY or p.wsi_id not in test_ids:
            raise LeakageError(
                f"patch ({p.wsi_id}, {p.row}, {p.col}) with origin {p.origin!r} reached a test fold")


# ---------------------------------------------------------------------------
# one fold


@dataclass
class FoldResult:
    repeat: int
    fold: int
    test_ids: list
    metrics: Metrics
    predictions: list
    n_train_real: int
    n_augmented: int

    def as_dict(self) -> dict:
        return {"repeat": self.repeat, "fold": self.fold, "test_ids": self.test_ids,
                "n_train_real": self.n_train_real, "n_augmented": self.n_augmented,
                **self.metrics.as_dict(),
                "predictions": [asdict(p) for p in self.predictions]}


def _retain(patches, fraction, rng):
    if fraction >= 1.0:
        return list(patches)
    by_wsi: dict = {}
    for p in patches:
        by_wsi.setdefault(p.wsi_id, []).append(p)
    kept = []
    for wid in sorted(by_wsi):
        group = by_wsi[wid]
        m = max(1, int(round(fraction * len(group))))
        for i in sorted(rng.choice(len(group), size=m, replace=False)):
            kept.append(group[i])
    return kept


def _config_key(cfg: PipelineConfig, train_ids, seed) -> str:
    body = json.dumps({"diffusion": asdict(cfg.diffusion), "train": asdict(cfg.train),
                       "denoiser": asdict(cfg.denoiser), "retain": cfg.retain_fraction,
                       "ids": sorted(train_ids), "seed": seed}, sort_keys=True)
    return hashlib.sha256(body.encode()).hexdigest()[:16]


def fit_fold_denoiser(train_patches, cfg: PipelineConfig, seed: int, cache_dir=None) -> DenoiserModel:
    x, y = patches_to_model_input(train_patches)
    sched = make_schedule(cfg.diffusion)
    path = None
    if cache_dir is not None:
        key = _config_key(cfg, {p.wsi_id for p in train_patches}, seed)
        path = Path(cache_dir) / f"denoiser-{key}.json"
        if path.exists():
            return DenoiserModel.load(path)
    arch = DenoiserArch(input_shape=x.shape[1:], **asdict(cfg.denoiser))
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    model = train((x, y), tcfg, sched, arch=arch)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
    return model


def run_fold(corpus: Corpus, train_ids, test_ids, cfg: PipelineConfig, seed: int,
             repeat: int = 0, fold: int = 0, classifier_factory: Optional[Callable] = None,
             importance_table: Optional[dict] = None, cache_dir=None) -> FoldResult:
    """Train on ``train_ids`` (optionally augmented) and fuse predictions for ``test_ids``."""
    rng = np.random.default_rng([seed, 0])
    wsis = corpus.by_id()
    train_patches = [p for wid in train_ids for p in tile_wsi(wsis[wid], corpus.patch_size)]
    train_patches = _retain(train_patches, cfg.retain_fraction, rng)

    model = None
    if cfg.needs_denoiser:
        model = fit_fold_denoiser(train_patches, cfg, job_seed(seed, 1), cache_dir)

    augmented = []
    if cfg.augmentation == "affine" and cfg.aug_count:
        mult = math.ceil(cfg.aug_count / len(train_patches))
        pool = affine_augment(train_patches, job_seed(seed, 2), mult)
        pick = np.sort(rng.choice(len(pool), size=cfg.aug_count, replace=False))
        augmented = [pool[i] for i in pick]
    elif cfg.augmentation == "diffusion" and cfg.aug_count:
        augmented = diffusion_augment(model, make_schedule(cfg.diffusion), cfg.aug_count,
                                      job_seed(seed, 3))

    fit_patches = train_patches + augmented
    X = feature_matrix(fit_patches, cfg.feature_kind, model)
    y = np.array([p.label for p in fit_patches])
    clf = (classifier_factory or (lambda: GbtPatchClassifier(cfg.gbt)))()
    clf.fit(X, y, fit_patches)

    preds, truth = [], []
    for wid in test_ids:
        patches = tile_wsi(wsis[wid], corpus.patch_size)
        check_no_leakage(patches, test_ids)
        scores = np.asarray(clf.decision(feature_matrix(patches, cfg.feature_kind, model), patches))
        votes = np.where(scores >= 0, 1, -1)
        imp = importance_provider(wid, patches, cfg.importance_kind, scores=scores,
                                  table=importance_table)
        preds.append(WsiPrediction.from_votes(wid, votes, imp.for_patches(patches), cfg.threshold))
        truth.append(wsis[wid].label)

    metrics = compute_metrics([p.label for p in preds], truth)
    return FoldResult(repeat, fold, list(test_ids), metrics, preds, len(train_patches), len(augmented))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    mode: str
    k: int
    repeats: int
    seed: int
    folds: list
    per_repeat: list

    def values(self, metric: str) -> list:
        return [r[metric] for r in self.per_repeat if r[metric] is not None]

    def summary(self) -> dict:
        out = {}
        for key, _ in METRIC_ROWS:
            vals = self.values(key)
            out[key] = {"mean": float(np.mean(vals)) if vals else None,
                        "std": float(np.std(vals)) if vals else None}
        return out

    def as_dict(self) -> dict:
        return {"mode": self.mode, "k": self.k, "repeats": self.repeats, "seed": self.seed,
                "summary": self.summary(), "per_repeat": self.per_repeat,
                "folds": [f.as_dict() for f in self.folds]}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=1) + "\n"


def _pool_repeat(folds: Sequence[FoldResult]) -> dict:
    tp = sum(f.metrics.tp for f in folds)
    fn = sum(f.metrics.fn for f in folds)
    tn = sum(f.metrics.tn for f in folds)
    fp = sum(f.metrics.fp for f in folds)
    return Metrics.from_counts(tp, fn, tn, fp).as_dict()


def _run_job(args):
    corpus, train_ids, test_ids, cfg, seed, repeat, fold, factory, table, cache_dir = args
    return run_fold(corpus, train_ids, test_ids, cfg, seed, repeat, fold, factory, table, cache_dir)


def cross_validate(corpus: Corpus, cfg: PipelineConfig, k: int = 5, repeats: int = 10, seed: int = 0,
                   workers: int = 1, classifier_factory: Optional[Callable] = None,
                   importance_table: Optional[dict] = None, cache_dir=None,
                   progress: Optional[Callable] = None) -> EvalReport:
    """Repeated stratified k-fold evaluation at WSI level.

    Each repeat draws a fresh stratified split; every fold trains on its
    training WSIs only (denoiser included) and is scored on the held-out
    WSIs after weighted fusion.  Metrics are pooled per repeat, then
    summarised as mean and standard deviation across repeats.
    """
    cfg.validate()
    if k < 2 or repeats < 1:
        raise ContractError("need k >= 2 and repeats >= 1")
    labels = corpus.labels()
    ids = [w.id for w in corpus.wsis]
    jobs = []
    for r in range(repeats):
        folds = stratified_folds(labels, k, job_seed(seed, r))
        for f in range(k):
            test_ids = [ids[i] for i in np.flatnonzero(folds == f)]
            train_ids = [ids[i] for i in np.flatnonzero(folds != f)]
            jobs.append((corpus, train_ids, test_ids, cfg, job_seed(seed, r, f), r, f,
                         classifier_factory, importance_table, cache_dir))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_job(job))
            if progress:
                progress(results[-1])

    per_repeat = []
    for r in range(repeats):
        fr = [x for x in results if x.repeat == r]
        if sum(x.metrics.total for x in fr) != len(ids):
            raise ContractError(f"repeat {r}: folds do not cover every WSI exactly once")
        per_repeat.append(_pool_repeat(fr))
    return EvalReport(cfg.augmentation, k, repeats, seed, results, per_repeat)


def format_table(reports: dict) -> str:
    """CSV with rows Accuracy/Sensitivity/Specificity and one column per mode."""
    order = [m for m in ("affine", "diffusion", "none") if m in reports]
    lines = ["metric," + ",".join(MODE_TITLES[m] for m in order)]
    for key, title in METRIC_ROWS:
        cells = []
        for m in order:
            s = reports[m].summary()[key]
            if s["mean"] is None:
                cells.append("n/a")
            else:
                cells.append(f"{100 * s['mean']:.2f}% ± {100 * s['std']:.2f}")
        lines.append(title + "," + ",".join(cells))
    return "\n".join(lines) + "\n"

"""Regional importance, thresholded patch weights, weighted voting and metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError

IMPORTANCE_THRESHOLD = 0.25
IMPORTANCE_KINDS = ("uniform", "classifier-saliency", "file")


@dataclass
class ImportanceMap:
    """Per-patch relevance in [0, 1], keyed by grid position."""

    wsi_id: str
    values: dict

    def __post_init__(self):
        for pos, r in self.values.items():
            if not 0.0 <= r <= 1.0:
                raise ContractError(f"importance at {pos} is {r}, outside [0, 1]")

    def for_patches(self, patches) -> np.ndarray:
        try:
            return np.array([self.values[(p.row, p.col)] for p in patches])
        except KeyError as exc:
            raise FormatError(f"{self.wsi_id}: no importance for patch {exc.args[0]}") from None


def minmax_unit(values) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all ones."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def read_importance_csv(path) -> dict:
    """Sidecar CSV ``wsi_id,row,col,r`` -> {wsi_id: {(row, col): r}}."""
    out: dict = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["wsi_id", "row", "col", "r"]:
            raise FormatError(f"{path}: expected header wsi_id,row,col,r")
        for rec in rd:
            out.setdefault(rec["wsi_id"], {})[(int(rec["row"]), int(rec["col"]))] = float(rec["r"])
    return out


def write_importance_csv(path, maps: Sequence[ImportanceMap]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wsi_id", "row", "col", "r"])
        for m in maps:
            for (row, col), r in sorted(m.values.items()):
                w.writerow([m.wsi_id, row, col, repr(float(r))])


def importance_provider(wsi_id: str, patches, kind: str = "uniform", scores=None,
                        table: Optional[dict] = None) -> ImportanceMap:
    """Build the importance map of one tiled WSI.

    ``uniform`` gives every patch 1; ``classifier-saliency`` min-max scales
    ``|scores|`` across the WSI; ``file`` looks values up in ``table`` (as
    returned by :func:`read_importance_csv`) and requires one per patch.
    """
    keys = [(p.row, p.col) for p in patches]
    if kind == "uniform":
        return ImportanceMap(wsi_id, {k: 1.0 for k in keys})
    if kind == "classifier-saliency":
        if scores is None or len(scores) != len(keys):
            raise ContractError("classifier-saliency needs one score per patch")
        r = minmax_unit(np.abs(np.asarray(scores, dtype=np.float64)))
        return ImportanceMap(wsi_id, {k: float(v) for k, v in zip(keys, r)})
    if kind == "file":
        entries = (table or {}).get(wsi_id, {})
        if len(entries) != len(keys) or set(entries) != set(keys):
            raise FormatError(f"{wsi_id}: importance file has {len(entries)} entries "
                              f"for {len(keys)} patches")
        return ImportanceMap(wsi_id, dict(entries))
    raise ConfigurationError(f"unknown importance kind {kind!r}")


def patch_weight(r: float, threshold: float = IMPORTANCE_THRESHOLD) -> float:
    """Zero below the threshold, otherwise the importance itself."""
    if not 0.0 <= r <= 1.0:
        raise ContractError(f"importance must lie in [0, 1], got {r}")
    return 0.0 if r < threshold else float(r)


def weighted_vote(y: Sequence[int], w: Sequence[float]) -> float:
    if len(y) != len(w):
        raise ContractError(f"{len(y)} votes but {len(w)} weights")
    if any(v not in (-1, 1) for v in y):
        raise ContractError("votes must be -1 or +1")
    if any(x < 0 for x in w):
        raise ContractError("weights must be non-negative")
    # y is +-1, so each term is exact and fsum's correctly rounded total has the exact sign
    return math.fsum(float(wj) if yj == 1 else -float(wj) for yj, wj in zip(y, w))


def fuse(y: Sequence[int], w: Sequence[float]) -> int:
    """Weighted majority vote; a zero sum counts as malignant (+1)."""
    return 1 if weighted_vote(y, w) >= 0 else -1


@dataclass
class WsiPrediction:
    wsi_id: str
    votes: list
    importance: list
    weights: list
    weighted_sum: float
    label: int

    @classmethod
    def from_votes(cls, wsi_id, votes, importance, threshold=IMPORTANCE_THRESHOLD):
        votes = [int(v) for v in votes]
        importance = [float(r) for r in importance]
        weights = [patch_weight(r, threshold) for r in importance]
        s = weighted_vote(votes, weights)
        return cls(wsi_id, votes, importance, weights, s, 1 if s >= 0 else -1)


@dataclass
class Metrics:
    tp: int
    fn: int
    tn: int
    fp: int
    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @classmethod
    def from_counts(cls, tp, fn, tn, fp) -> "Metrics":
        n = tp + fn + tn + fp
        if n == 0:
            raise ContractError("metrics need at least one prediction")
        return cls(tp, fn, tn, fp, (tp + tn) / n,
                   tp / (tp + fn) if tp + fn else None,
                   tn / (tn + fp) if tn + fp else None)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("tp", "fn", "tn", "fp", "accuracy", "sensitivity", "specificity")}


def compute_metrics(preds: Sequence[int], labels: Sequence[int]) -> Metrics:
    """Confusion counts with malignant (+1) as the positive class."""
    if len(preds) != len(labels):
        raise ContractError(f"{len(preds)} predictions for {len(labels)} labels")
    if not len(preds):
        raise ContractError("metrics need at least one prediction")
    p = np.asarray(preds)
    t = np.asarray(labels)
    if not (set(np.unique(t)) <= {-1, 1} and set(np.unique(p)) <= {-1, 1}):
        raise ContractError("labels and predictions must be -1 or +1")
    tp = int(np.sum((p == 1) & (t == 1)))
    fn = int(np.sum((p == -1) & (t == 1)))
    tn = int(np.sum((p == -1) & (t == -1)))
    fp = int(np.sum((p == 1) & (t == -1)))
    return Metrics.from_counts(tp, fn, tn, fp)

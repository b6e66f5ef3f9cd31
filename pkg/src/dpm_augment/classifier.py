"""Patch features and a second-order gradient-boosted tree classifier.

Trees are grown by exact greedy search on the logistic loss: every node
tries every midpoint between consecutive distinct feature values, and
leaves take the Newton weight ``-G / (H + lambda)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, FormatError

HIST_BINS = 8
STATS_DIM = 3 * (2 + HIST_BINS) + 2
FEATURE_KINDS = ("stats", "denoiser-encoder")


# ---------------------------------------------------------------------------
# features


def _fmean(a: np.ndarray) -> float:
    # exactly rounded, hence independent of element order
    return math.fsum(a.ravel().tolist()) / a.size


def _fvar(a: np.ndarray, mean: float) -> float:
    d = a.ravel() - mean
    return math.fsum((d * d).tolist()) / a.size


def stats_features(pixels: np.ndarray) -> np.ndarray:
    """Per-channel mean, variance and 8-bin histogram, then gradient-magnitude mean/variance.

    All statistics are invariant to rotations and flips of the patch.
    """
    px = np.asarray(pixels, dtype=np.float64)
    feats = []
    n = px.shape[0] * px.shape[1]
    for ch in range(3):
        v = px[..., ch]
        m = _fmean(v)
        feats += [m, _fvar(v, m)]
        bins = np.minimum((v * HIST_BINS).astype(np.int64), HIST_BINS - 1)
        bins = np.maximum(bins, 0)
        feats += (np.bincount(bins.ravel(), minlength=HIST_BINS) / n).tolist()
    gray = px.mean(axis=2)
    if min(gray.shape) >= 2:
        gy, gx = np.gradient(gray)
        mag = np.sqrt(gx * gx + gy * gy)
    else:
        mag = np.zeros_like(gray)
    gm = _fmean(mag)
    feats += [gm, _fvar(mag, gm)]
    return np.array(feats)


def extract_features(patch, kind: str = "stats", model=None) -> np.ndarray:
    """Feature vector for one patch (see :func:`feature_matrix` for batches)."""
    return feature_matrix([patch], kind, model)[0]


def feature_matrix(patches: Sequence, kind: str = "stats", model=None, batch: int = 128) -> np.ndarray:
    if kind == "stats":
        if not len(patches):
            return np.zeros((0, STATS_DIM))
        return np.stack([stats_features(p.pixels) for p in patches])
    if kind == "denoiser-encoder":
        if model is None:
            raise ConfigurationError("denoiser-encoder features need a trained denoiser")
        rows = []
        for i in range(0, len(patches), batch):
            chunk = patches[i:i + batch]
            x = np.stack([p.pixels.transpose(2, 0, 1) for p in chunk]) * 2.0 - 1.0
            rows.append(model.encode_features(x, t=0))
        width = model.arch.width(model.arch.levels - 1)
        return np.concatenate(rows) if rows else np.zeros((0, width))
    raise ConfigurationError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def write_feature_csv(path, X: np.ndarray, labels: Sequence[int], ids: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(X.shape[1])])
        for i, (row, y) in enumerate(zip(X, labels)):
            w.writerow([ids[i] if ids else i, int(y)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# boosted trees


@dataclass
class GbtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    base_score: float = 0.0

    def validate(self) -> None:
        if self.n_trees < 0 or self.max_depth < 0:
            raise ConfigurationError("n_trees and max_depth must be >= 0")
        if not self.learning_rate > 0 or self.reg_lambda < 0:
            raise ConfigurationError("learning_rate must be > 0 and reg_lambda >= 0")


@dataclass
class TreeNode:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.value}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "leaf" in d:
            return cls(value=float(d["leaf"]))
        return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        self._fill(X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, X, idx, out):
        if self.is_leaf:
            out[idx] = self.value
            return
        go_left = X[idx, self.feature] < self.threshold
        self.left._fill(X, idx[go_left], out)
        self.right._fill(X, idx[~go_left], out)

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())


@dataclass
class Split:
    feature: int
    threshold: float
    gain: float


def split_gain(GL, HL, GR, HR, lam):
    """Loss reduction of a split for the second-order objective."""
    G, H = GL + GR, HL + HR
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam))


def select_split(candidates) -> Optional[Split]:
    """Pick the winning candidate among ``(feature, threshold, gain)`` triples.

    The best gain wins; gains within a relative 1e-10 of the best count as
    ties and go to the lowest feature index, then the lowest threshold.
    Zero-gain splits are admissible (a balanced XOR node needs one before
    its children can gain anything); returns None when every candidate
    makes the objective worse.
    """
    cands = list(candidates)
    if not cands:
        return None
    best = max(c[2] for c in cands)
    tol = 1e-10 * max(1.0, abs(best))
    if best < -tol:
        return None
    f, thr, gain = min((c for c in cands if c[2] >= best - tol), key=lambda c: (c[0], c[1]))
    return Split(int(f), float(thr), float(gain))


def _midpoint(a: float, b: float) -> float:
    m = 0.5 * (a + b)
    return m if a < m else b


def best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float) -> Optional[Split]:
    """Exact greedy split search via sorted prefix sums."""
    G, H = g.sum(), h.sum()
    candidates = []
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cg = np.cumsum(g[order])[:-1]
        ch = np.cumsum(h[order])[:-1]
        pos = np.flatnonzero(xs[:-1] < xs[1:])
        if not pos.size:
            continue
        gains = split_gain(cg[pos], ch[pos], G - cg[pos], H - ch[pos], lam)
        top = gains.max()
        tol = 1e-10 * max(1.0, abs(top))
        for i in np.flatnonzero(gains >= top - tol):
            p = pos[i]
            candidates.append((f, _midpoint(xs[p], xs[p + 1]), gains[i]))
    return select_split(candidates)


def _leaf_value(g, h, lam):
    return float(-g.sum() / max(h.sum() + lam, 1e-300))


def grow_tree(X, g, h, cfg: GbtConfig, depth: int = 0) -> TreeNode:
    # a node whose gradients are all zero is already fitted
    if depth < cfg.max_depth and X.shape[0] >= 2 and np.any(g != 0):
        split = best_split(X, g, h, cfg.reg_lambda)
        if split is not None:
            left = X[:, split.feature] < split.threshold
            return TreeNode(feature=split.feature, threshold=split.threshold,
                            left=grow_tree(X[left], g[left], h[left], cfg, depth + 1),
                            right=grow_tree(X[~left], g[~left], h[~left], cfg, depth + 1))
    return TreeNode(value=_leaf_value(g, h, cfg.reg_lambda))


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def logistic_loss(scores: np.ndarray, y: np.ndarray) -> float:
    """Mean log-loss for labels in {-1, +1}."""
    return float(np.mean(np.logaddexp(0.0, -y * scores)))


@dataclass
class GbtModel:
    trees: list = field(default_factory=list)
    learning_rate: float = 0.1
    n_trees: int = 0
    max_depth: int = 3
    base_score: float = 0.0
    n_features: int = 0
    train_loss: list = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ContractError(f"model expects {self.n_features} features, got {X.shape[1]}")
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return self.base_score + self.learning_rate * total

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1, -1)

    def to_json(self) -> str:
        body = {"kind": "gbt-logistic", "learning_rate": self.learning_rate, "n_trees": self.n_trees,
                "max_depth": self.max_depth, "base_score": self.base_score,
                "n_features": self.n_features, "trees": [t.to_dict() for t in self.trees]}
        return json.dumps(body, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GbtModel":
        body = json.loads(text)
        if body.get("kind") != "gbt-logistic":
            raise FormatError("not a boosted-tree model file")
        return cls([TreeNode.from_dict(t) for t in body["trees"]], body["learning_rate"],
                   body["n_trees"], body["max_depth"], body["base_score"], body["n_features"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GbtModel":
        return cls.from_json(Path(path).read_text())


def gbt_train(X, y, cfg: GbtConfig = GbtConfig()) -> GbtModel:
    """Boost ``cfg.n_trees`` regression trees on the logistic loss; labels in {-1, +1}."""
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ContractError(f"X {X.shape} and y {y.shape} disagree")
    if X.shape[0] < 2:
        raise ContractError("need at least two training rows")
    if not set(np.unique(y)) <= {-1, 1}:
        raise ContractError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise ContractError("both classes must be present")
    if not np.all(np.isfinite(X)):
        raise ContractError("features must be finite")
    y01 = (y == 1).astype(np.float64)
    model = GbtModel(learning_rate=cfg.learning_rate, n_trees=cfg.n_trees, max_depth=cfg.max_depth,
                     base_score=cfg.base_score, n_features=X.shape[1])
    scores = np.full(X.shape[0], cfg.base_score)
    model.train_loss.append(logistic_loss(scores, y))
    for _ in range(cfg.n_trees):
        p = _sigmoid(scores)
        g = p - y01
        h = p * (1.0 - p)
        tree = grow_tree(X, g, h, cfg)
        model.trees.append(tree)
        scores = scores + cfg.learning_rate * tree.predict(X)
        model.train_loss.append(logistic_loss(scores, y))
    return model


def gbt_predict(model: GbtModel, x) -> tuple:
    """Score and {-1, +1} decision for one feature vector; score 0 maps to +1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a single feature vector, got shape {x.shape}")
    score = float(model.decision_function(x[None])[0])
    return score, (1 if score >= 0 else -1)

"""Whole-surface images, non-overlapping tiling, the synthetic corpus and augmentation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ppm
from .diffusion import NoiseSchedule, sample
from .errors import ContractError, FormatError

BENIGN, MALIGNANT = -1, 1
TRAIN_ONLY = "train-only"
ORIGINS = ("real", "diffusion", "affine")
AFFINE_OPS = ("rot90", "rot180", "rot270", "hflip", "vflip")
MANIFEST_FIELDS = ["wsi_id", "row", "col", "label", "origin", "path"]


@dataclass
class WsiRecord:
    id: str
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (BENIGN, MALIGNANT):
            raise ContractError(f"WSI label must be -1 or +1, got {self.label}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ContractError(f"WSI pixels must be H x W x 3, got {self.pixels.shape}")

    @property
    def size(self) -> tuple:
        return self.pixels.shape[:2]


@dataclass
class Patch:
    wsi_id: str
    row: int
    col: int
    pixels: np.ndarray
    label: int
    origin: str = "real"
    fold: object = None
    path: str = ""


@dataclass
class Corpus:
    wsis: list
    patch_size: int
    folds: dict = field(default_factory=dict)

    def labels(self) -> np.ndarray:
        return np.array([w.label for w in self.wsis])

    def by_id(self) -> dict:
        return {w.id: w for w in self.wsis}


def label_to_class(label: int) -> int:
    """Map a WSI/patch label in {-1, +1} to a class id (0 benign, 1 malignant)."""
    return 1 if label == MALIGNANT else 0


def class_to_label(c: int) -> int:
    return MALIGNANT if c == 1 else BENIGN


# ---------------------------------------------------------------------------
# tiling


def tile_wsi(wsi: WsiRecord, patch_size: int) -> list:
    """Cut a regular grid of ``patch_size`` squares; trailing pixels are dropped."""
    s = int(patch_size)
    h, w = wsi.size
    if s < 1:
        raise ContractError(f"patch size must be >= 1, got {s}")
    if s > min(h, w):
        raise ContractError(f"patch size {s} exceeds WSI {wsi.id} of size {h}x{w}")
    out = []
    for r in range(h // s):
        for c in range(w // s):
            px = wsi.pixels[r * s:(r + 1) * s, c * s:(c + 1) * s].copy()
            out.append(Patch(wsi.id, r, c, px, wsi.label))
    return out


def reassemble(patches: Sequence[Patch]) -> np.ndarray:
    s = patches[0].pixels.shape[0]
    rows = 1 + max(p.row for p in patches)
    cols = 1 + max(p.col for p in patches)
    img = np.zeros((rows * s, cols * s, 3))
    for p in patches:
        img[p.row * s:(p.row + 1) * s, p.col * s:(p.col + 1) * s] = p.pixels
    return img


def tile_corpus(corpus: Corpus, wsi_ids: Optional[Iterable[str]] = None) -> list:
    keep = None if wsi_ids is None else set(wsi_ids)
    out = []
    for w in corpus.wsis:
        if keep is None or w.id in keep:
            out.extend(tile_wsi(w, corpus.patch_size))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


def _benign_texture(rng, h, w):
    base = np.array([0.22, 0.55, 0.30]) + rng.normal(0, 0.05, 3) * np.array([1.0, 1.5, 1.0])
    smooth = rng.uniform(3.0, 6.0)
    field_ = np.stack([gaussian_filter(rng.standard_normal((h, w)), smooth) for _ in range(3)], -1)
    field_ /= field_.std() + 1e-12
    shared = gaussian_filter(rng.standard_normal((h, w)), smooth)
    shared /= shared.std() + 1e-12
    amp = rng.uniform(0.05, 0.09)
    img = base + amp * (0.5 * field_ + 0.8 * shared[..., None] * np.array([0.6, 1.0, 0.6]))
    img += rng.normal(0, 0.015, (h, w, 3))
    return img


def _malignant_texture(rng, h, w):
    # hue ranges from magenta-red towards light green, as in real malignant tissue
    mix = rng.uniform(0.0, 0.35)
    red = np.array([0.62, 0.26, 0.50])
    green = np.array([0.45, 0.58, 0.40])
    base = (1 - mix) * red + mix * green + rng.normal(0, 0.04, 3)
    fine = np.stack([gaussian_filter(rng.standard_normal((h, w)), 0.7) for _ in range(3)], -1)
    fine /= fine.std() + 1e-12
    img = base + rng.uniform(0.06, 0.10) * fine
    # nucleus-like blobs
    density = rng.uniform(0.006, 0.012)
    n_blobs = rng.poisson(density * h * w)
    yy, xx = np.mgrid[0:h, 0:w]
    blobs = np.zeros((h, w))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(1.2, 2.6)
        blobs = np.maximum(blobs, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2)))
    img += blobs[..., None] * rng.uniform(0.25, 0.4) * np.array([1.0, 0.55, 0.9])
    return img


def make_synthetic_corpus(seed: int = 0, n_benign: int = 24, n_malignant: int = 36,
                          wsi_size: int = 128, patch_size: int = 32) -> Corpus:
    """Procedural stand-in corpus with class-specific color and texture.

    Benign WSIs carry smooth, green-dominant texture; malignant WSIs carry
    fine red/magenta texture with bright nucleus-like blobs.  Pixels are
    quantized to 8-bit levels so the corpus survives a PPM round trip.
    """
    if n_benign < 1 or n_malignant < 1:
        raise ContractError("need at least one WSI per class")
    if patch_size < 1 or patch_size > wsi_size:
        raise ContractError(f"patch size {patch_size} incompatible with WSI size {wsi_size}")
    wsis = []
    labels = [BENIGN] * n_benign + [MALIGNANT] * n_malignant
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        make = _benign_texture if label == BENIGN else _malignant_texture
        img = make(rng, wsi_size, wsi_size)
        pixels = ppm.to_uint8(img).astype(np.float64) / 255.0
        wsis.append(WsiRecord(f"wsi{i:03d}", pixels, label))
    return Corpus(wsis, patch_size)


# ---------------------------------------------------------------------------
# augmentation


def apply_affine(pixels: np.ndarray, op: str) -> np.ndarray:
    if op == "rot90":
        return np.rot90(pixels, 1)
    if op == "rot180":
        return np.rot90(pixels, 2)
    if op == "rot270":
        return np.rot90(pixels, 3)
    if op == "hflip":
        return pixels[:, ::-1]
    if op == "vflip":
        return pixels[::-1]
    raise ContractError(f"unknown affine op {op!r}")


def affine_augment(patches: Sequence[Patch], seed: int, multiplier: int = 1) -> list:
    """``multiplier`` transformed copies of every patch (rotations and flips)."""
    if multiplier < 1:
        raise ContractError(f"multiplier must be >= 1, got {multiplier}")
    rng = np.random.default_rng(seed)
    out = []
    for p in patches:
        for _ in range(multiplier):
            op = AFFINE_OPS[rng.integers(len(AFFINE_OPS))]
            px = np.ascontiguousarray(apply_affine(p.pixels, op))
            out.append(Patch(p.wsi_id, p.row, p.col, px, p.label, "affine", TRAIN_ONLY))
    return out


def patches_to_model_input(patches: Sequence[Patch]) -> tuple:
    """Stack patches as NCHW scaled to [-1, 1], plus class ids."""
    x = np.stack([p.pixels.transpose(2, 0, 1) for p in patches]) * 2.0 - 1.0
    y = np.array([label_to_class(p.label) for p in patches], dtype=np.int64)
    return x, y


def model_output_to_pixels(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`patches_to_model_input` for a batch, clamped to [0, 1]."""
    return np.clip((x.transpose(0, 2, 3, 1) + 1.0) / 2.0, 0.0, 1.0)


def diffusion_augment(model, sched: NoiseSchedule, n_total: int, seed: int) -> list:
    """``n_total`` synthetic patches, half per class, labelled by their conditioning class."""
    if n_total < 0 or n_total % 2:
        raise ContractError(f"n_total must be a non-negative even count, got {n_total}")
    out = []
    for c in (0, 1):
        x = sample(model, sched, c, n_total // 2, seed=seed * 2 + c)
        label = class_to_label(c)
        for i, px in enumerate(model_output_to_pixels(x) if len(x) else []):
            out.append(Patch(f"dpm-{label:+d}", i, 0, px, label, "diffusion", TRAIN_ONLY))
    return out


# ---------------------------------------------------------------------------
# on-disk corpus


def write_corpus(corpus: Corpus, root) -> Path:
    """One directory per WSI (``wsi.ppm`` + ``meta.json``) and a patch manifest CSV."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for w in corpus.wsis:
        d = root / w.id
        d.mkdir(exist_ok=True)
        ppm.write_ppm(d / "wsi.ppm", w.pixels)
        h, wd = w.size
        meta = {"id": w.id, "label": w.label, "size": [h, wd]}
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        for p in tile_wsi(w, corpus.patch_size):
            rows.append([p.wsi_id, p.row, p.col, p.label, p.origin, f"{w.id}/wsi.ppm"])
    (root / "corpus.json").write_text(json.dumps(
        {"patch_size": corpus.patch_size, "wsis": [w.id for w in corpus.wsis]}, indent=1) + "\n")
    write_manifest(root / "manifest.csv", rows)
    return root


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        wr.writerows(rows)


def read_manifest(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"{path}: unexpected manifest header {rd.fieldnames}")
        return list(rd)


def read_corpus(root) -> Corpus:
    root = Path(root)
    index_path = root / "corpus.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no corpus index at {index_path}")
    index = json.loads(index_path.read_text())
    wsis = []
    for wid in index["wsis"]:
        meta = json.loads((root / wid / "meta.json").read_text())
        pixels = ppm.read_ppm(root / wid / "wsi.ppm")
        if list(pixels.shape[:2]) != meta["size"]:
            raise FormatError(f"{wid}: image size {pixels.shape[:2]} disagrees with meta {meta['size']}")
        wsis.append(WsiRecord(meta["id"], pixels, int(meta["label"])))
    return Corpus(wsis, int(index["patch_size"]))


def write_patches(patches: Sequence[Patch], root, prefix: str = "patch") -> list:
    """Write each patch as its own PPM; returns manifest rows."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, p in enumerate(patches):
        name = f"{prefix}{i:05d}.ppm"
        ppm.write_ppm(root / name, p.pixels)
        rows.append([p.wsi_id, p.row, p.col, p.label, p.origin, name])
    return rows


def read_patch_manifest(path) -> list:
    base = Path(path).parent
    out = []
    for r in read_manifest(path):
        px = ppm.read_ppm(base / r["path"])
        fold = TRAIN_ONLY if r["origin"] != "real" else None
        out.append(Patch(r["wsi_id"], int(r["row"]), int(r["col"]), px, int(r["label"]),
                         r["origin"], fold, r["path"]))
    return out

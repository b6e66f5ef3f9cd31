"""Command-line entry point: ``dpm-augment <command> [flags]``.

Every command reads one flat JSON config (``--config``), applies flag
overrides, copies the effective config to ``<out>/config.json`` and records
provenance in ``<out>/run.json``.  Outputs depend only on (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, ppm
from .classifier import feature_matrix, gbt_train, write_feature_csv
from .config import RunConfig, load_config, parse_assignment
from .denoiser import DenoiserArch, DenoiserModel, LossRecord, TrainingDiverged, train, write_loss_log
from .diffusion import make_schedule, sample
from .errors import ConfigurationError, DpmAugmentError
from .evaluation import cross_validate, format_table
from .fusion import read_importance_csv
from .patches import (
    BENIGN, MALIGNANT, affine_augment, diffusion_augment, label_to_class,
    make_synthetic_corpus, model_output_to_pixels, patches_to_model_input, read_corpus,
    read_patch_manifest, tile_corpus, write_corpus, write_manifest, write_patches,
)

log = logging.getLogger("dpm_augment")

CLASS_NAMES = {"benign": BENIGN, "malignant": MALIGNANT}


# ---------------------------------------------------------------------------
# helpers


def _out(cfg: RunConfig, *parts) -> Path:
    p = Path(cfg.out).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _record_run(cfg: RunConfig, command: str, outputs: list, extra: dict | None = None) -> None:
    root = _out(cfg)
    (root / "config.json").write_text(cfg.to_json())
    run_path = root / "run.json"
    runs = json.loads(run_path.read_text()) if run_path.exists() else {}
    runs[command] = {"version": __version__, "seed": cfg.seed,
                     "config": "config.json",
                     "outputs": sorted(_rel(o, root) for o in outputs),
                     **(extra or {})}
    run_path.write_text(json.dumps(runs, indent=1, sort_keys=True) + "\n")


def _rel(path, root: Path) -> str:
    path = Path(path)
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def _checkpoint_path(cfg: RunConfig, given) -> Path:
    return Path(given) if given else Path(cfg.out) / "dpm" / "checkpoint.json"


def _load_model(cfg: RunConfig, given) -> DenoiserModel:
    path = _checkpoint_path(cfg, given)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return DenoiserModel.load(path)


def _parse_classes(text: str) -> list:
    if text == "all":
        return [BENIGN, MALIGNANT]
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in CLASS_NAMES:
            out.append(CLASS_NAMES[tok])
        elif tok in ("-1", "1"):
            out.append(int(tok))
        elif tok == "0":
            out.append(BENIGN)
        else:
            raise ConfigurationError(f"unknown class {tok!r}; use benign, malignant or all")
    return out


def _read_loss_log(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [LossRecord(int(r["step"]), float(r["loss"]), float(r["wall_time"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    corpus = make_synthetic_corpus(cfg.seed, cfg.n_benign, cfg.n_malignant, cfg.wsi_size,
                                   cfg.patch_size)
    root = write_corpus(corpus, cfg.corpus_path)
    n_patches = sum(w.size[0] // corpus.patch_size * (w.size[1] // corpus.patch_size)
                    for w in corpus.wsis)
    labels = corpus.labels()
    print(f"corpus: {len(corpus.wsis)} WSIs ({int(np.sum(labels == BENIGN))} benign, "
          f"{int(np.sum(labels == MALIGNANT))} malignant), {n_patches} patches of "
          f"{corpus.patch_size}x{corpus.patch_size} -> {root}")
    _record_run(cfg, "gen-corpus", [root / "corpus.json", root / "manifest.csv"],
                {"wsis": len(corpus.wsis), "patches": n_patches})
    return 0


def cmd_train_dpm(cfg: RunConfig, args) -> int:
    corpus = read_corpus(cfg.corpus_path)
    x, y = patches_to_model_input(tile_corpus(corpus))
    sched = make_schedule(cfg.diffusion())
    root = _out(cfg, "dpm")
    ckpt = root / "checkpoint.json"
    log_path = root / "loss_log.csv"
    history = []
    model = None
    if args.resume and ckpt.exists():
        model = DenoiserModel.load(ckpt)
        history = [r for r in _read_loss_log(log_path) if r.step < model.step]
        print(f"resuming from step {model.step}")
    else:
        arch = DenoiserArch(x.shape[1:], cfg.base_channels, cfg.blocks_per_level, cfg.levels,
                            cfg.embed_dim)
    try:
        model = train((x, y), cfg.train(), sched, model=model, arch=None if model else arch)
    except TrainingDiverged as exc:
        print(f"error: training diverged at step {exc.step} (loss {exc.loss})", file=sys.stderr)
        return 1
    history.extend(model.history)
    model.save(ckpt)
    write_loss_log(log_path, history)
    sched.to_csv(root / "schedule.csv")
    last = history[-1].loss if history else float("nan")
    print(f"trained to step {model.step} (T={sched.T}); final loss {last:.6f} -> {ckpt}")
    _record_run(cfg, "train-dpm", [ckpt, log_path, root / "schedule.csv"])
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, args.checkpoint)
    sched = make_schedule(cfg.diffusion())
    if model.arch.mode != "image":
        raise ConfigurationError("sampling to images needs an image-mode denoiser")
    outputs = []
    for label in _parse_classes(args.cls):
        name = "benign" if label == BENIGN else "malignant"
        root = _out(cfg, "samples", name)
        c = label_to_class(label)
        x = sample(model, sched, c, args.n, seed=cfg.seed * 2 + c)
        pixels = model_output_to_pixels(x) if len(x) else []
        for i, px in enumerate(pixels):
            path = root / f"sample_{i:05d}.ppm"
            ppm.write_ppm(path, px)
            outputs.append(path)
        if len(pixels):
            m = math.ceil(math.sqrt(len(pixels)))
            ppm.write_ppm(root / "grid.ppm", ppm.contact_sheet(list(pixels), cols=m))
            outputs.append(root / "grid.ppm")
        print(f"{name}: {len(pixels)} samples -> {root}")
    _record_run(cfg, "sample", outputs, {"n": args.n, "classes": args.cls})
    return 0


def cmd_augment(cfg: RunConfig, args) -> int:
    corpus = read_corpus(cfg.corpus_path)
    real = tile_corpus(corpus)
    mode = cfg.augmentation
    if mode == "affine":
        pool = affine_augment(real, cfg.seed, max(1, math.ceil(cfg.aug_count / len(real))))
        rng = np.random.default_rng([cfg.seed, 0])
        pick = np.sort(rng.choice(len(pool), size=min(cfg.aug_count, len(pool)), replace=False))
        patches = [pool[i] for i in pick]
    elif mode == "diffusion":
        model = _load_model(cfg, args.checkpoint)
        patches = diffusion_augment(model, make_schedule(cfg.diffusion()), cfg.aug_count, cfg.seed)
    else:
        patches = []
    root = _out(cfg, "augment")
    rows = write_patches(patches, root, prefix=f"{mode}_")
    write_manifest(root / "manifest.csv", rows)
    print(f"{mode}: {len(patches)} augmented patches -> {root}")
    _record_run(cfg, "augment", [root / "manifest.csv"] + [root / r[-1] for r in rows])
    return 0


def cmd_train_clf(cfg: RunConfig, args) -> int:
    corpus = read_corpus(cfg.corpus_path)
    patches = tile_corpus(corpus)
    if args.augmented:
        patches = patches + read_patch_manifest(args.augmented)
    model = _load_model(cfg, args.checkpoint) if cfg.feature_kind == "denoiser-encoder" else None
    X = feature_matrix(patches, cfg.feature_kind, model)
    y = np.array([p.label for p in patches])
    gbt = gbt_train(X, y, cfg.gbt())
    root = _out(cfg, "clf")
    gbt.save(root / "model.json")
    ids = [f"{p.wsi_id}:{p.row}:{p.col}:{p.origin}" for p in patches]
    write_feature_csv(root / "features.csv", X, y.tolist(), ids)
    acc = float(np.mean(gbt.predict(X) == y))
    print(f"GBT: {len(gbt.trees)} trees on {len(patches)} patches; training accuracy {acc:.4f}")
    _record_run(cfg, "train-clf", [root / "model.json", root / "features.csv"])
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    corpus = read_corpus(cfg.corpus_path)
    table = read_importance_csv(cfg.importance_file) if cfg.importance_kind == "file" else None
    reports = {}
    for mode in cfg.modes:
        def progress(fr, mode=mode):
            print(f"[{mode}] repeat {fr.repeat} fold {fr.fold}: "
                  f"accuracy {fr.metrics.accuracy:.4f}", file=sys.stderr, flush=True)
        reports[mode] = cross_validate(corpus, cfg.pipeline(mode), k=cfg.k, repeats=cfg.repeats,
                                       seed=cfg.seed, workers=cfg.workers, importance_table=table,
                                       progress=None if args.quiet else progress)
    root = _out(cfg, "eval")
    body = {m: r.as_dict() for m, r in reports.items()}
    (root / "report.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    text = format_table(reports)
    (root / "table.csv").write_text(text)
    print(text, end="")
    _record_run(cfg, "evaluate", [root / "report.json", root / "table.csv"])
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-dpm": cmd_train_dpm,
    "sample": cmd_sample,
    "augment": cmd_augment,
    "train-clf": cmd_train_clf,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="worker processes for evaluation")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dpm-augment",
                                     description="Diffusion augmentation and WSI fusion pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic WSI corpus")
    p = sub.add_parser("train-dpm", parents=[common], help="train the class-conditional denoiser")
    p.add_argument("--resume", action="store_true", help="continue from <out>/dpm/checkpoint.json")
    p = sub.add_parser("sample", parents=[common], help="draw samples and a contact sheet")
    p.add_argument("--class", dest="cls", default="all", help="benign, malignant or all")
    p.add_argument("-n", type=int, default=4, help="samples per class")
    p.add_argument("--checkpoint")
    p = sub.add_parser("augment", parents=[common], help="write augmented patches")
    p.add_argument("--checkpoint")
    p = sub.add_parser("train-clf", parents=[common], help="train the patch classifier")
    p.add_argument("--augmented", help="augmented patch manifest to include")
    p.add_argument("--checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="repeated k-fold evaluation")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-fold progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = dict(parse_assignment(s) for s in args.overrides)
        for flag in ("seed", "workers", "out"):
            if getattr(args, flag) is not None:
                overrides[flag] = getattr(args, flag)
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (DpmAugmentError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one PASS/FAIL line per criterion, collected into the terminal summary."""

import csv
import json
import math
import time

import numpy as np
import pytest

from dpm_augment.autodiff import Tensor
from dpm_augment.classifier import GbtConfig, grow_tree
from dpm_augment.cli import main
from dpm_augment.denoiser import DenoiserArch, DenoiserModel, TrainConfig, train
from dpm_augment.diffusion import (
    forward_sample, hybrid_loss, make_schedule, reverse_step, sample,
    schedule_from_betas,
)
from dpm_augment.fusion import fuse, patch_weight
from gradcheck import check_gradients
from test_autodiff import _layer_cases
from test_classifier import brute_tree, random_instance, same_tree
from test_fusion import adversarial_weights, exact_fuse

RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst, kinds = 0.0, 0
    cases = dict(_layer_cases())
    for shape in [(3,), (2, 4, 4)]:
        def model_case(shape=shape):
            m = DenoiserModel(DenoiserArch(shape, base_channels=3, blocks_per_level=1, levels=2,
                                           embed_dim=4), seed=2)
            rng = np.random.default_rng(4)
            x, eps = rng.standard_normal((2,) + shape), rng.standard_normal((2,) + shape)
            return (lambda: hybrid_loss(eps, m.forward(Tensor(x), [3, 7], [0, 1]))), list(m.params.values())
        cases[f"denoiser{shape}"] = model_case
    for name, make in cases.items():
        build, params = make()
        errs, n = check_gradients(build, params, n_probe=100, seed=3)
        assert n >= 100, name
        worst, kinds = max(worst, float(errs.max())), kinds + 1
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-4 and elapsed < 60,
           f"{kinds} layer kinds x 100 params, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_criterion_2_schedule():
    s = make_schedule()
    ab = s.alpha_bar
    ok = s.T == 1000 and bool(np.all(np.diff(ab) < 0)) and ab[-1] < 1e-3
    report(2, ok, f"T={s.T}, alpha_bar strictly decreasing, alpha_bar_T={ab[-1]:.3e} (< 1e-3)")


def test_criterion_3_forward_marginals():
    s = make_schedule()
    n, mu0, var0 = 10_000, 1.5, 0.25
    worst = 0.0
    for t in (1, s.T // 2, s.T - 1):
        rng = np.random.default_rng(t)
        out = forward_sample(mu0 + math.sqrt(var0) * rng.standard_normal(n), t, rng.standard_normal(n), s)
        ab = s.alpha_bar[t]
        mean, var = math.sqrt(ab) * mu0, ab * var0 + 1 - ab
        z_mean = abs(out.mean() - mean) / math.sqrt(var / n)
        z_var = abs(out.var(ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean, z_var)
    report(3, worst < 3, f"t in (1, T/2, T-1), 1e4 draws, worst deviation {worst:.2f} SE (< 3)")


def test_criterion_4_round_trip():
    rng = np.random.default_rng(0)
    worst = 0.0
    scheds = [schedule_from_betas([b]) for b in (1e-4, 0.02, 0.3, 0.5, 0.9)] + [make_schedule()]
    for s in scheds:
        x0, eps = rng.standard_normal(1000), rng.standard_normal(1000)
        back = reverse_step(forward_sample(x0, 0, eps, s), 0, eps, s)
        worst = max(worst, float(np.max(np.abs(back - x0))))
    report(4, worst < 1e-9, f"oracle one-step reverse of forward, max error {worst:.2e} (< 1e-9)")


def test_criterion_5_toy_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    c = rng.integers(0, 2, 2048)
    x = (np.where(c == 0, -2.0, 2.0) + math.sqrt(0.1) * rng.standard_normal(2048))[:, None]
    s = make_schedule()
    m = train((x, c), TrainConfig(learning_rate=0.05, batch_size=128, epochs=150), s,
              arch=DenoiserArch((1,), base_channels=64, levels=1, embed_dim=32))
    means = [float(sample(m, s, cls, 10_000, seed=11 + cls).mean()) for cls in (0, 1)]
    elapsed = time.perf_counter() - start
    ok = (means[0] < 0 < means[1] and abs(means[0] + 2) < 0.3 and abs(means[1] - 2) < 0.3
          and elapsed < 600)
    report(5, ok, f"class means {means[0]:+.3f} / {means[1]:+.3f} vs -2 / +2 (|err| < 0.3), "
                  f"1e4 samples per class, {elapsed:.0f}s (< 600s)")


def test_criterion_6_gbt_oracle():
    rng = np.random.default_rng(2024)
    matched = 0
    for _ in range(100):
        X, g, h, lam = random_instance(rng)
        depth = int(rng.integers(1, 4))
        if lam == 0:
            h = h + 0.01  # finite leaf weights without regularization
        tree = grow_tree(X, g, h, GbtConfig(max_depth=depth, reg_lambda=lam))
        matched += same_tree(tree, brute_tree(X, g, h, lam, 0, depth), X)
    report(6, matched == 100, f"greedy tree equals exhaustive search on {matched}/100 instances")


def test_criterion_7_fusion_oracle():
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(0, 13))
        y = rng.choice([-1, 1], n).tolist()
        w = adversarial_weights(rng, n)
        agree += fuse(y, w) == exact_fuse(y, w)
    invariant = 0
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        y = rng.choice([-1, 1], n)
        r = rng.random(n)
        w = [patch_weight(v) for v in r]
        flipped = np.where((r < 0.25) & (rng.random(n) < 0.5), -y, y)
        invariant += fuse(y.tolist(), w) == fuse(flipped.tolist(), w)
    report(7, agree == 1000 and invariant == 1000,
           f"rational oracle agreement {agree}/1000, sub-threshold flips inert {invariant}/1000")


E2E = {
    "seed": 0, "n_benign": 24, "n_malignant": 36, "wsi_size": 64, "patch_size": 8,
    "T": 50, "beta_end": 0.3, "learning_rate": 0.05, "epochs": 30, "batch_size": 32,
    "base_channels": 8, "blocks_per_level": 1, "levels": 2, "embed_dim": 16,
    "n_trees": 50, "max_depth": 3, "modes": ["affine", "diffusion"], "aug_count": 100,
    "retain_fraction": 0.3, "k": 5, "repeats": 10,
}


@pytest.mark.slow
def test_criterion_8_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "e2e.json"
    cfg.write_text(json.dumps({**E2E, "out": str(tmp_path / "run")}))
    start = time.perf_counter()
    assert main(["gen-corpus", "--config", str(cfg)]) == 0
    assert main(["evaluate", "--config", str(cfg), "-q"]) == 0
    elapsed = time.perf_counter() - start
    table = capsys.readouterr().out.strip().splitlines()
    rep = json.loads((tmp_path / "run" / "eval" / "report.json").read_text())
    acc = {m: rep[m]["summary"]["accuracy"] for m in ("affine", "diffusion")}
    folds = {m: len(rep[m]["folds"]) for m in rep}
    with capsys.disabled():
        print("\n" + "\n".join(table[-4:]))
    ok = (acc["diffusion"]["mean"] >= acc["affine"]["mean"] and elapsed < 3600
          and folds == {"affine": 50, "diffusion": 50})
    report(8, ok, f"mean accuracy diffusion {acc['diffusion']['mean']:.4f} >= affine "
                  f"{acc['affine']['mean']:.4f} over 10x5 folds, {elapsed / 60:.1f} min (< 60 min)")


TINY = {
    "n_benign": 5, "n_malignant": 5, "wsi_size": 32, "patch_size": 8, "T": 20, "beta_end": 0.8,
    "learning_rate": 0.05, "epochs": 2, "batch_size": 32, "base_channels": 4, "blocks_per_level": 1,
    "levels": 2, "embed_dim": 8, "n_trees": 5, "max_depth": 2, "aug_count": 8, "k": 2,
    "repeats": 2, "retain_fraction": 0.5, "modes": ["none", "affine", "diffusion"],
}


def _strip_volatile(path):
    """Timing columns and self-referencing paths are excluded from byte identity."""
    if path.name == "loss_log.csv":
        rows = list(csv.reader(open(path)))
        return "\n".join(",".join(r[:2]) for r in rows).encode()
    if path.name in ("run.json", "config.json"):
        body = json.loads(path.read_text())
        body.pop("out", None)
        for entry in body.values():
            if isinstance(entry, dict):
                entry.pop("out", None)
        return json.dumps(body, sort_keys=True).encode()
    return path.read_bytes()


def test_criterion_9_reproducibility(tmp_path):
    roots = []
    for d in ("a", "b"):
        root = tmp_path / d
        cfg = tmp_path / f"{d}.json"
        cfg.write_text(json.dumps({**TINY, "out": str(root)}))
        for cmd in (["gen-corpus"], ["train-dpm"], ["sample", "-n", "4"], ["augment"],
                    ["train-clf", "--augmented", str(root / "augment" / "manifest.csv")],
                    ["evaluate", "-q"]):
            assert main([cmd[0], "--config", str(cfg), *cmd[1:]]) == 0
        roots.append(root)
    a, b = roots
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same_set = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    diffs = [str(r) for r in files if same_set and _strip_volatile(a / r) != _strip_volatile(b / r)]
    report(9, same_set and not diffs,
           f"6 commands rerun, {len(files)} output files byte-identical (wall_time excluded), "
           f"mismatches: {diffs or 'none'}")

"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are printed in an "acceptance criteria" section at the end of the run.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from gradsuite import run_suite
from oracles import brute_force_metrics

from twoview.checkpoint import dumps_checkpoint, loads_checkpoint
from twoview.cli import run_cli
from twoview.evaluation import confusion_from_labels, evaluate_suite, metrics_from_confusion
from twoview.nets import build_single_view, fuse, mini_config, parameter_digest
from twoview.patches import Patch, PipelineConfig, augment_patch, balance_classes, build_patches, split_train_test, whiten_patch
from twoview.patches.whiten import whiten_pixels
from twoview.synth import generate_synthetic, single_view_ceiling
from twoview.training import (
    TrainConfig,
    adam_quadratic_probe,
    build_multiview,
    freeze_features,
    pair_views,
    train_multiview,
    train_single_view,
)

pytestmark = pytest.mark.slow


def test_ac01_multiview_beats_single_view(tmp_path, criterion):
    t0 = time.perf_counter()
    m = generate_synthetic(tmp_path, classes=4, specimens=30, image_size=128, seed=1, mode="joint-code")
    cfg = PipelineConfig(patch_size=64, patches_per_image=6, target_per_class_per_view=180, val_fraction=0.0,
                         augmentation_variants=1, seed=1)  # fmt: skip
    patches, _ = build_patches(m, cfg)
    train = [whiten_patch(p) for p in patches if p.split == "train"]
    test = [whiten_patch(p) for p in patches if p.split == "test"]
    classes = m.class_set

    sv = build_single_view(mini_config(64), 4, init_seed=3)
    sv, _ = train_single_view(sv, train, None, TrainConfig(epochs=10, seed=5), classes)
    mv = build_multiview(freeze_features(sv), "maxpool", 4, init_seed=7)
    mv, _ = train_multiview(mv, pair_views(train, "specimen_first", 9), None, TrainConfig(epochs=20, seed=11), classes)
    rep = evaluate_suite(sv, mv, test, classes, pairing_seed=13, names={"sv": "SV", "mv": "MV"})
    elapsed = time.perf_counter() - t0

    sv_mixed, mv_paired = rep.row("SV", "mixed"), rep.row("MV", "paired")
    ceiling = single_view_ceiling(4, "joint-code")["mixed"]
    margin = mv_paired.weighted_precision - sv_mixed.weighted_precision
    ok = margin >= 0.25 and abs(sv_mixed.accuracy - ceiling) <= 0.08 and elapsed <= 600
    criterion("AC1 MV superiority", ok, f"margin={margin:.4f} sv_acc={sv_mixed.accuracy:.4f} (ceiling {ceiling}) {elapsed:.0f}s")
    assert margin >= 0.25
    assert abs(sv_mixed.accuracy - ceiling) <= 0.08
    assert elapsed <= 600


def test_ac02_dataset_arithmetic(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    classes = ["WW", "WD", "AU", "STR", "BRU", "CYS"]
    supply = [
        Patch(f"{c}-{v}-{i:05d}", rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), c, v, f"{c}-{i % 40}-{v}", f"{c}-{i % 40}")
        for c in classes
        for v in ("surface", "section")
        for i in range(1200)
    ]
    balanced, deficits = balance_classes(supply, 1000, seed=1)
    # per class: surface 1000 + section 1000 + a mixed copy of both = 4000
    mixed = [replace(p, patch_id=f"mix-{p.patch_id}") for p in balanced]
    per_class = balanced + mixed
    counts = {c: sum(p.label == c for p in per_class) for c in classes}
    train, test, _ = split_train_test(per_class, 0.20, seed=2, leak_free=False)
    config = PipelineConfig(patch_size=16)
    augmented = [a for p in train for a in augment_patch(p, 7, seed=3, config=config)]
    total_train = len(train) + len(augmented)
    elapsed = time.perf_counter() - t0

    ok = (not deficits and set(counts.values()) == {4000} and (len(train), len(test)) == (19200, 4800)
          and total_train == 153600 and elapsed <= 120)  # fmt: skip
    criterion("AC2 dataset arithmetic", ok, f"train={len(train)} test={len(test)} augmented_train={total_train} {elapsed:.0f}s")
    assert not deficits and set(counts.values()) == {4000}
    assert (len(train), len(test)) == (19200, 4800)
    assert total_train == 153600
    assert elapsed <= 120


def test_ac03_whitening(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_mu = worst_sigma = 0.0
    flag_ok = True
    for i in range(1000):
        size = int(rng.integers(4, 65))
        px = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        if i % 50 == 0:
            px[..., int(rng.integers(0, 3))] = rng.integers(0, 256)  # one flat channel
        values, _, std, floored = whiten_pixels(px, 1e-6)
        live = std > 1e-6
        flag_ok &= floored == (not live.all())
        mu, sd = values.mean(axis=(0, 1)), values.std(axis=(0, 1))
        worst_mu = max(worst_mu, float(np.abs(mu[live]).max()))
        worst_sigma = max(worst_sigma, float(np.abs(sd[live] - 1).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_mu < 1e-5 and worst_sigma < 1e-5 and flag_ok and elapsed <= 10
    criterion("AC3 whitening", ok, f"max|mu|={worst_mu:.2e} max|sigma-1|={worst_sigma:.2e} {elapsed:.1f}s")
    assert ok


def test_ac04_gradient_suite(criterion):
    t0 = time.perf_counter()
    errors = run_suite(shapes_per_layer=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed <= 120
    criterion("AC4 gradient suite", ok, f"worst rel err={worst:.2e} over {len(errors)} checks x 20 shapes {elapsed:.0f}s")
    assert worst < 1e-4, errors
    assert elapsed <= 120


def test_ac05_frozen_branches(criterion):
    rng = np.random.default_rng(0)
    items = []
    for c in ("WW", "WD", "AU"):
        for k in range(6):
            for v in ("surface", "section"):
                px = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
                items.append(whiten_patch(Patch(f"{c}{k}{v}", px, c, v, f"{c}{k}-{v}", f"{c}{k}")))
    sv = build_single_view(mini_config(32, 64), 3, init_seed=0)
    mv = build_multiview(freeze_features(sv), "maxpool", 3, init_seed=1)
    at_build = parameter_digest(mv.branch_surface) == parameter_digest(mv.branch_section)
    before = parameter_digest(mv.branch_surface), parameter_digest(mv.branch_section)
    train_multiview(mv, pair_views(items, "specimen_first", 0), None, TrainConfig(epochs=5, learning_rate=1e-3, batch_size=8),
                    ["WW", "WD", "AU"])  # fmt: skip
    after = parameter_digest(mv.branch_surface), parameter_digest(mv.branch_section)
    ok = at_build and before == after
    criterion("AC5 frozen-branch immutability", ok, f"identical at build={at_build} unchanged after 5 epochs={before == after}")
    assert ok


def test_ac06_metrics_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    bounded = True
    for _ in range(1000):
        c = int(rng.integers(2, 9))
        n = int(rng.integers(1, 200))
        yt = rng.integers(0, c, n).tolist()
        yp = np.where(rng.random(n) < 0.5, yt, rng.integers(0, c, n)).tolist()
        r = metrics_from_confusion(confusion_from_labels(yt, yp, [str(i) for i in range(c)]))
        prec, rec, sup, wp, wr, acc = brute_force_metrics(yt, yp, c)
        diffs = [abs(a - float(b)) for a, b in zip(r.precision + r.recall, prec + rec)]
        diffs += [abs(r.weighted_precision - float(wp)), abs(r.weighted_recall - float(wr)), abs(r.accuracy - float(acc))]
        worst = max(worst, max(diffs))
        bounded &= r.support == sup
        bounded &= min(r.precision) - 1e-12 <= r.weighted_precision <= max(r.precision) + 1e-12
        bounded &= min(r.recall) - 1e-12 <= r.weighted_recall <= max(r.recall) + 1e-12
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and bounded and elapsed <= 30
    criterion("AC6 metrics oracle", ok, f"max deviation={worst:.1e} bounds hold={bounded} {elapsed:.1f}s")
    assert ok


def test_ac07_fusion_algebra(criterion):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    pairs = 0
    ok = True
    for d in (1, 2, 3, 7, 16, 64, 128, 256, 1000, 4096):
        # small integers make exact ties common; odd widths add continuous noise to x
        x = torch.randint(-3, 4, (1000, d), generator=gen).double() + torch.randn(1000, d, generator=gen).double() * (d % 2)
        y = torch.randint(-3, 4, (1000, d), generator=gen).double()
        ok &= torch.equal(fuse(x, y, "maxpool"), fuse(y, x, "maxpool"))
        ok &= torch.equal(fuse(x, x, "maxpool"), x)
        ok &= torch.equal(fuse(x, y, "maxpool"), torch.maximum(x, y))
        cat = fuse(x, y, "concat")
        ok &= cat.shape == (1000, 2 * d) and torch.equal(cat[:, :d], x) and torch.equal(cat[:, d:], y)
        pairs += 1000
    elapsed = time.perf_counter() - t0
    ok = bool(ok) and pairs >= 10_000 and elapsed <= 10
    criterion("AC7 fusion algebra", ok, f"{pairs} pairs {elapsed:.1f}s")
    assert ok


def _cli_run(root, data):
    patches, sv, mv, rep = root / "patches", root / "sv", root / "mv", root / "report.json"
    assert run_cli(["patchify", "--manifest", str(data / "manifest.jsonl"), "--patch-size", "32", "--patches-per-image", "4",
                    "--target", "12", "--seed", "7", "--out", str(patches)]) == 0  # fmt: skip
    assert run_cli(["train-sv", "--patches", str(patches), "--epochs", "3", "--feature-dim", "32", "--precision", "float64",
                    "--seed", "7", "--out", str(sv)]) == 0  # fmt: skip
    assert run_cli(["train-mv", "--sv-checkpoint", str(sv / "sv.ckpt"), "--patches", str(patches), "--epochs", "3",
                    "--seed", "7", "--out", str(mv)]) == 0  # fmt: skip
    assert run_cli(["eval", "--checkpoint", str(sv / "sv.ckpt"), "--checkpoint", str(mv / "mv.ckpt"), "--patches", str(patches),
                    "--seed", "7", "--report-out", str(rep)]) == 0  # fmt: skip
    return rep.read_bytes()


def test_ac08_determinism(tmp_path, criterion):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    generate_synthetic(data, classes=4, specimens=4, image_size=64, seed=7, mode="joint-code")
    first = _cli_run(tmp_path / "run1", data)
    second = _cli_run(tmp_path / "run2", data)
    elapsed = time.perf_counter() - t0
    ok = first == second and elapsed <= 900
    criterion("AC8 determinism", ok, f"report bytes identical={first == second} ({len(first)} B) {elapsed:.0f}s")
    assert ok


def test_ac09_adam_probe(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    target = rng.uniform(-0.3, 0.3, size=16)
    w, first = adam_quadratic_probe(np.zeros(16), target, lr=2e-4, steps=5000)
    dist = float(np.linalg.norm(w - target))
    elapsed = time.perf_counter() - t0
    ok = dist < 1e-3 and first is not None and elapsed <= 5
    criterion("AC9 Adam probe", ok, f"final distance={dist:.2e} first within 1e-3 at step {first} {elapsed:.2f}s")
    assert ok


def test_ac10_checkpoint_round_trip(criterion):
    t0 = time.perf_counter()
    ok = True
    for dtype in (torch.float32, torch.float64):
        sv = build_single_view(mini_config(64), 6, init_seed=0, dtype=dtype)
        for model in (sv, build_multiview(freeze_features(sv), "concat", 6, init_seed=1)):
            data = dumps_checkpoint(model, ["a"] * 6)
            loaded, _ = loads_checkpoint(data)
            ok &= dumps_checkpoint(loaded, ["a"] * 6) == data
            x = torch.randn(2, 64, 64, 3, dtype=dtype, generator=torch.Generator().manual_seed(1))
            with torch.no_grad():
                args = (x, x.flip(2)) if hasattr(model, "fusion") else (x,)
                ok &= torch.equal(loaded(*args), model(*args))
    elapsed = time.perf_counter() - t0
    ok = bool(ok) and elapsed <= 10
    criterion("AC10 checkpoint round-trip", ok, f"bytes and outputs identical {elapsed:.1f}s")
    assert ok

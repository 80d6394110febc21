"""Manifest -> balanced, split, augmented patch store."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .. import __version__
from ..data_model import DatasetManifest
from ..seeding import derive_seed
from .augment import augment_patch
from .extract import decode_image, extract_patches
from .sampling import balance_classes, split_train_test
from .store import stratum_counts, write_patch_store
from .types import Patch, PipelineConfig

log = logging.getLogger(__name__)


def step_seeds(config: PipelineConfig) -> dict[str, int]:
    return {step: derive_seed(config.seed, "patchify", step) for step in ("extract", "balance", "split", "val", "augment")}


def build_patches(manifest: DatasetManifest, config: PipelineConfig) -> tuple[list[Patch], dict]:
    """Run extraction, balancing, splitting and augmentation in memory.

    Returns every patch (split field set) and the run metadata.
    """
    seeds = step_seeds(config)

    def one(record):
        return extract_patches(decode_image(manifest.resolve(record)), record, config, seeds["extract"])

    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        per_image = list(pool.map(one, manifest.records))
    extracted = [p for group in per_image for p in group]
    empty_images = [r.image_id for r, g in zip(manifest.records, per_image) if not g]

    balanced, deficits = balance_classes(extracted, config.target_per_class_per_view, seeds["balance"])
    train, test, split_report = split_train_test(balanced, config.test_fraction, seeds["split"], config.leak_free)
    val: list[Patch] = []
    val_report = None
    if config.val_fraction > 0:
        train, val, val_report = split_train_test(train, config.val_fraction, seeds["val"], config.leak_free)

    train = [replace(p, split="train") for p in train]
    val = [replace(p, split="val") for p in val]
    test = [replace(p, split="test") for p in test]
    augmented = [a for p in train for a in augment_patch(p, config.augmentation_variants, seeds["augment"], config)]

    everything = sorted(train + augmented + val + test, key=lambda p: p.patch_id)
    metadata = {
        "toolkit_version": __version__,
        "classes": list(manifest.class_set),
        "config": config.to_json(),
        "seed": config.seed,
        "step_seeds": seeds,
        "counts": {
            "extracted": stratum_counts(extracted),
            "balanced": stratum_counts(balanced),
            "train": stratum_counts(train),
            "train_augmented": len(augmented),
            "val": stratum_counts(val),
            "test": stratum_counts(test),
        },
        "deficits": deficits,
        "split": split_report,
        "val_split": val_report,
        "images_without_patches": empty_images,
    }
    for key, short in deficits.items():
        log.warning("stratum %s is %d patches short of the target", key, short)
    return everything, metadata


def run_patchify(manifest: DatasetManifest, config: PipelineConfig, out_dir: str | Path) -> Path:
    patches, metadata = build_patches(manifest, config)
    return write_patch_store(out_dir, patches, metadata)

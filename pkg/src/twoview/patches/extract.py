from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..data_model import ImageRecord
from ..seeding import rng_for
from .types import Patch, PatchError, PipelineConfig

log = logging.getLogger(__name__)


def decode_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise PatchError(f"cannot decode image {str(path)!r}: {exc}") from None


def background_fraction_map(image: np.ndarray, config: PipelineConfig) -> np.ndarray:
    """Fraction of background pixels inside every patch_size crop, indexed by crop origin."""
    p = config.patch_size
    bg = np.asarray(config.background_color, dtype=np.int16)
    mask = np.all(np.abs(image.astype(np.int16) - bg) <= config.background_tolerance, axis=-1)
    s = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    s[1:, 1:] = mask.cumsum(0).cumsum(1)
    sums = s[p:, p:] - s[:-p, p:] - s[p:, :-p] + s[:-p, :-p]
    return sums / float(p * p)


def extract_patches(image: np.ndarray, record: ImageRecord, config: PipelineConfig, seed: int) -> list[Patch]:
    """Crop up to ``patches_per_image`` distinct foreground patches from one image.

    Crop origins are drawn uniformly without replacement among origins whose
    crop has less than ``max_background_fraction`` background pixels.
    """
    p = config.patch_size
    if image.ndim != 3 or image.shape[2] != 3:
        raise PatchError(f"image {record.image_id!r}: expected HxWx3, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < p or w < p:
        raise PatchError(f"image {record.image_id!r} is {h}x{w}, smaller than patch size {p}")

    frac = background_fraction_map(image, config)
    valid = np.flatnonzero(frac.ravel() < config.max_background_fraction)
    if valid.size == 0:
        log.warning("image %s: no crop passes the foreground test; 0 patches", record.image_id)
        return []
    rng = rng_for(seed, "extract", record.image_id)
    k = min(config.patches_per_image, valid.size)
    chosen = valid[rng.choice(valid.size, size=k, replace=False)]
    n_cols = frac.shape[1]
    patches = []
    for flat in chosen:
        y, x = divmod(int(flat), n_cols)
        patches.append(
            Patch(
                patch_id=f"{record.image_id}_y{y:04d}x{x:04d}",
                pixels=np.ascontiguousarray(image[y : y + p, x : x + p]),
                label=record.stone_class,
                view=record.view,
                source_image_id=record.image_id,
                specimen_id=record.specimen_id,
            )
        )
    return patches

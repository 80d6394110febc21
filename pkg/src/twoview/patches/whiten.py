from __future__ import annotations

import numpy as np

from .types import NormalizedPatch, Patch


def whiten_pixels(pixels: np.ndarray, sigma_floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    x = pixels.astype(np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))  # population std: {0, 2} maps to -1, +1
    denom = np.maximum(std, sigma_floor)
    return (x - mean) / denom, mean, std, bool(np.any(std <= sigma_floor))


def whiten_patch(patch: Patch, sigma_floor: float = 1e-6) -> NormalizedPatch:
    """Per-channel standardisation with the patch's own mean and std."""
    values, mean, std, floored = whiten_pixels(patch.pixels, sigma_floor)
    return NormalizedPatch(
        values=values,
        mean=mean,
        std=std,
        floored=floored,
        patch_id=patch.patch_id,
        label=patch.label,
        view=patch.view,
        specimen_id=patch.specimen_id,
    )

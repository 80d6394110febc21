"""Geometric augmentation: flips, affine warps, perspective distortion.

Warps run on a reflect-padded copy of the patch and are cropped back to the
original size, so no constant fill enters the output.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

from ..seeding import rng_for
from .types import Patch, PipelineConfig

KINDS = ("hflip", "vflip", "affine", "perspective")


def sample_params(rng: np.random.Generator, size: int, config: PipelineConfig) -> dict:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "affine":
        t = config.max_translate * size
        lo, hi = config.scale_range
        return {
            "kind": kind,
            "angle": float(rng.uniform(-config.rotation_deg, config.rotation_deg)),
            "scale": float(rng.uniform(lo, hi)),
            "tx": float(rng.uniform(-t, t)),
            "ty": float(rng.uniform(-t, t)),
        }
    if kind == "perspective":
        j = config.perspective_jitter * size
        return {"kind": kind, "corners": rng.uniform(-j, j, size=(4, 2)).round(6).tolist()}
    return {"kind": kind}


def _affine_coeffs(angle: float, scale: float, tx: float, ty: float, center: float) -> tuple:
    th = math.radians(angle)
    # inverse of x' = c + s R (x - c) + t, as PIL maps output -> input
    inv = np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]]) / scale
    c = np.array([center, center])
    off = c - inv @ (c + np.array([tx, ty]))
    return (inv[0, 0], inv[0, 1], off[0], inv[1, 0], inv[1, 1], off[1])


def _perspective_coeffs(dst: np.ndarray, src: np.ndarray) -> tuple:
    """Coefficients mapping output points ``dst`` to input points ``src``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(dst, src):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    return tuple(np.linalg.solve(np.array(rows, float), np.array(rhs, float)))


def apply_transform(pixels: np.ndarray, params: dict) -> np.ndarray:
    kind = params["kind"]
    if kind == "hflip":
        return np.ascontiguousarray(pixels[:, ::-1])
    if kind == "vflip":
        return np.ascontiguousarray(pixels[::-1])

    size = pixels.shape[0]
    pad = size // 2
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    full = padded.shape[0]
    im = Image.fromarray(padded)
    if kind == "affine":
        coeffs = _affine_coeffs(params["angle"], params["scale"], params["tx"], params["ty"], full / 2.0)
        out = im.transform((full, full), Image.Transform.AFFINE, coeffs, resample=Image.Resampling.BILINEAR)
    elif kind == "perspective":
        dst = np.array([[pad, pad], [pad + size, pad], [pad + size, pad + size], [pad, pad + size]], float)
        src = dst + np.asarray(params["corners"], float)
        coeffs = _perspective_coeffs(dst, src)
        out = im.transform((full, full), Image.Transform.PERSPECTIVE, coeffs, resample=Image.Resampling.BILINEAR)
    else:
        raise ValueError(f"unknown transform {kind!r}")
    return np.ascontiguousarray(np.asarray(out)[pad : pad + size, pad : pad + size])


def augment_patch(patch: Patch, variants: int, seed: int, config: PipelineConfig | None = None) -> list[Patch]:
    """Return ``variants`` randomly transformed copies, seeded by (seed, patch_id)."""
    config = config or PipelineConfig(patch_size=max(8, patch.pixels.shape[0]))
    rng = rng_for(seed, "augment", patch.patch_id)
    out = []
    for k in range(variants):
        params = sample_params(rng, patch.pixels.shape[0], config)
        out.append(
            Patch(
                patch_id=f"{patch.patch_id}_a{k}",
                pixels=apply_transform(patch.pixels, params),
                label=patch.label,
                view=patch.view,
                source_image_id=patch.source_image_id,
                specimen_id=patch.specimen_id,
                augmented_from=patch.patch_id,
                split=patch.split,
            )
        )
    return out

"""Procedural two-view dataset generator.

Every specimen gets one surface and one section image: a textured elliptical
"stone" on a black backdrop. Stripes run along a view-specific orientation.

* ``texture`` mode: each class has its own hue and stripe frequency, so
  either view alone identifies the class.
* ``joint-code`` mode: all classes share one hue. The surface stripe
  frequency encodes ``class // 2`` and the section frequency encodes
  ``class % 2``, so for four classes neither view alone does better than
  chance between two candidates.
"""

from __future__ import annotations

import colorsys
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
from PIL import Image

from .data_model import DEFAULT_CLASSES, DatasetManifest, ImageRecord, write_manifest
from .seeding import rng_for

MODES = ("texture", "joint-code")
ORIENTATION = {"surface": 0.0, "section": math.pi / 2}
FREQ_LEVELS = (0.05, 0.11, 0.17, 0.23, 0.29, 0.35)


def class_labels(n: int) -> list[str]:
    if n <= len(DEFAULT_CLASSES):
        return list(DEFAULT_CLASSES[:n])
    return [f"C{i:02d}" for i in range(n)]


def view_code(class_index: int, view: str, num_classes: int, mode: str) -> int:
    """Texture code the generator renders for one (class, view)."""
    if mode == "texture":
        return class_index
    return class_index // 2 if view == "surface" else class_index % 2


def single_view_ceiling(num_classes: int, mode: str) -> dict[str, float]:
    """Bayes accuracy of a classifier that sees one view, by enumerating the code map.

    With balanced classes, the best guess for a code is any class rendering
    it, so the accuracy for a view is (distinct codes) / (classes).
    """
    out = {}
    for view in ("surface", "section"):
        members = defaultdict(list)
        for c in range(num_classes):
            members[view_code(c, view, num_classes, mode)].append(c)
        # each code contributes P(code) * max_c P(c | code) = 1 / C
        out[view] = len(members) / num_classes
    out["mixed"] = (out["surface"] + out["section"]) / 2
    return out


def _frequency(code: int, num_classes: int, mode: str) -> float:
    if mode == "texture":
        return 0.05 + 0.15 * code / max(1, num_classes - 1)
    return FREQ_LEVELS[code]


def render_image(size: int, class_index: int, view: str, num_classes: int, mode: str,
                 rng: np.random.Generator) -> np.ndarray:  # fmt: skip
    hue = class_index / num_classes if mode == "texture" else 0.1
    base = np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.8))
    freq = _frequency(view_code(class_index, view, num_classes, mode), num_classes, mode)
    freq *= rng.uniform(0.95, 1.05)
    theta = ORIENTATION[view] + rng.uniform(-0.15, 0.15)
    phase = rng.uniform(0, 2 * math.pi)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    stripes = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    shade = 0.6 + 0.3 * stripes + rng.normal(0, 0.08, size=(size, size))
    rgb = base[None, None, :] * shade[..., None] * 255 + rng.normal(0, 4, size=(size, size, 3))
    rgb = np.clip(rgb, 30, 255)

    c = (size - 1) / 2
    r = size * 0.47 * rng.uniform(0.95, 1.0)
    inside = (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    img = np.where(inside[..., None], rgb, 0.0)
    return np.round(img).astype(np.uint8)


def generate_synthetic(out: str | Path, classes: int = 6, specimens: int = 5, image_size: int = 128,
                       seed: int = 0, mode: str = "texture") -> DatasetManifest:  # fmt: skip
    """Write ``classes * specimens * 2`` PNG images and ``manifest.jsonl`` under ``out``."""
    if classes < 1 or specimens < 1:
        raise ValueError("classes and specimens must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "joint-code" and (classes % 2 or classes // 2 > len(FREQ_LEVELS)):
        raise ValueError("joint-code mode needs an even class count of at most 12")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    labels = class_labels(classes)
    records = []
    for ci, label in enumerate(labels):
        for s in range(specimens):
            specimen = f"{label}-s{s:03d}"
            for view in ("surface", "section"):
                image_id = f"{specimen}-{view}"
                img = render_image(image_size, ci, view, classes, mode, rng_for(seed, "synth", mode, image_id))
                rel = f"images/{image_id}.png"
                Image.fromarray(img).save(out / rel, format="PNG", compress_level=6)
                records.append(ImageRecord(image_id, rel, label, view, specimen))
    manifest = DatasetManifest(labels, records, root=out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest

"""On-disk patch store: ``<patch_id>.png`` files plus a ``patches.jsonl`` index."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .extract import decode_image
from .types import NormalizedPatch, Patch
from .whiten import whiten_patch

INDEX = "patches.jsonl"
META = "run.json"


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_patch_store(out_dir: str | Path, patches: list[Patch], metadata: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in patches:
        Image.fromarray(p.pixels).save(out / f"{p.patch_id}.png", format="PNG", compress_level=6)
    with open(out / INDEX, "w", encoding="utf-8") as fh:
        for p in patches:
            fh.write(json.dumps(p.index_row()) + "\n")
    dump_json(metadata, out / META)
    return out


def stratum_counts(patches) -> dict[str, int]:
    c = Counter(f"{p.label}/{p.view}" for p in patches)
    return dict(sorted(c.items()))


@dataclass
class PatchStore:
    root: Path
    rows: list[dict]
    metadata: dict

    @classmethod
    def open(cls, root: str | Path) -> "PatchStore":
        root = Path(root)
        index = root / INDEX
        if not index.exists():
            raise FileNotFoundError(f"not a patch store (no {INDEX}): {root}")
        rows = [json.loads(line) for line in index.read_text(encoding="utf-8").splitlines() if line.strip()]
        meta = json.loads((root / META).read_text(encoding="utf-8")) if (root / META).exists() else {}
        return cls(root, rows, meta)

    @property
    def class_set(self) -> list[str]:
        if "classes" in self.metadata:
            return list(self.metadata["classes"])
        return sorted({r["label"] for r in self.rows})

    @property
    def sigma_floor(self) -> float:
        return float(self.metadata.get("config", {}).get("sigma_floor", 1e-6))

    def select(self, split: str | None = None, view: str | None = None, originals_only: bool = False) -> list[dict]:
        out = []
        for r in self.rows:
            if split is not None and r["split"] != split:
                continue
            if view is not None and r["view"] != view:
                continue
            if originals_only and r.get("augmented_from"):
                continue
            out.append(r)
        return out

    def load_patch(self, row: dict) -> Patch:
        return Patch(
            patch_id=row["patch_id"],
            pixels=decode_image(self.root / f"{row['patch_id']}.png"),
            label=row["label"],
            view=row["view"],
            source_image_id=row["source_image_id"],
            specimen_id=row["specimen_id"],
            augmented_from=row.get("augmented_from"),
            split=row["split"],
        )

    def patches(self, split: str | None = None, view: str | None = None) -> list[Patch]:
        return [self.load_patch(r) for r in self.select(split, view)]

    def normalized(self, split: str | None = None, view: str | None = None) -> list[NormalizedPatch]:
        return [whiten_patch(p, self.sigma_floor) for p in self.patches(split, view)]


def stack_values(items: list[NormalizedPatch], dtype=np.float64) -> np.ndarray:
    """B x H x W x 3 array from normalized patches."""
    return np.stack([n.values for n in items]).astype(dtype, copy=False)

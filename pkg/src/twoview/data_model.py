"""Label taxonomy, image manifest schema and validation.

The manifest is JSON lines. The first line is a header object
``{"version": 1, "classes": [...]}``; every following line is one image
record with keys ``image_id, path, class, view, specimen_id`` and an
optional ``split`` (defaults to ``"unassigned"``).
"""

from __future__ import annotations

import enum
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

MANIFEST_VERSION = 1


class StoneClass(enum.IntEnum):
    """Reference six-class profile; the integer value is the serialization code."""

    WW = 0
    WD = 1
    AU = 2
    STR = 3
    BRU = 4
    CYS = 5


DEFAULT_CLASSES: tuple[str, ...] = tuple(c.name for c in StoneClass)


class ViewKind(str, enum.Enum):
    SURFACE = "surface"
    SECTION = "section"


VIEWS: tuple[str, ...] = tuple(v.value for v in ViewKind)
SPLITS = ("train", "val", "test", "unassigned")


class ManifestError(ValueError):
    """Raised when a manifest file cannot be parsed."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    stone_class: str
    view: str
    specimen_id: str
    split: str = "unassigned"

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "path": self.path,
            "class": self.stone_class,
            "view": self.view,
            "specimen_id": self.specimen_id,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    class_set: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    records: list[ImageRecord] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    # directory that relative record paths are resolved against
    root: Path | None = None

    def class_index(self, label: str) -> int:
        return self.class_set.index(label)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def with_splits(self, splits: dict[str, str]) -> "DatasetManifest":
        recs = [replace(r, split=splits.get(r.image_id, r.split)) for r in self.records]
        return DatasetManifest(list(self.class_set), recs, self.version, self.root)


_REQUIRED = ("image_id", "path", "class", "view", "specimen_id")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    manifest = DatasetManifest(root=path.parent)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    seen_header = False
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{path}:{lineno}: expected a JSON object")
        if not seen_header and "version" in obj:
            seen_header = True
            if obj["version"] != MANIFEST_VERSION:
                raise ManifestError(f"{path}:{lineno}: unknown format version {obj['version']!r}")
            classes = obj.get("classes")
            if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
                raise ManifestError(f"{path}:{lineno}: header 'classes' must be a list of strings")
            manifest.class_set = list(classes)
            manifest.version = obj["version"]
            continue
        if not seen_header and lineno == 1:
            raise ManifestError(f"{path}:1: first line must be the version header")
        for key in _REQUIRED:
            if key not in obj:
                raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
        manifest.records.append(
            ImageRecord(
                image_id=str(obj["image_id"]),
                path=str(obj["path"]),
                stone_class=str(obj["class"]),
                view=str(obj["view"]),
                specimen_id=str(obj["specimen_id"]),
                split=str(obj.get("split", "unassigned")),
            )
        )
    return manifest


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = [json.dumps({"version": manifest.version, "classes": list(manifest.class_set)})]
    lines.extend(json.dumps(r.to_json()) for r in manifest.records)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")


def validate_manifest(manifest: DatasetManifest, check_files: bool = False) -> list[str]:
    """Return every invariant violation as a readable string; empty means valid."""
    violations: list[str] = []
    counts = Counter(r.image_id for r in manifest.records)
    for image_id, n in counts.items():
        if n > 1:
            violations.append(f"duplicate image_id {image_id!r} ({n} records)")
    if len(set(manifest.class_set)) != len(manifest.class_set):
        violations.append("class_set contains duplicate labels")
    known = set(manifest.class_set)
    for r in manifest.records:
        if r.stone_class not in known:
            violations.append(f"{r.image_id!r}: class {r.stone_class!r} not in class_set")
        if r.view not in VIEWS:
            violations.append(f"{r.image_id!r}: unknown view {r.view!r}")
        if not r.specimen_id:
            violations.append(f"{r.image_id!r}: empty specimen_id")
        if r.split not in SPLITS:
            violations.append(f"{r.image_id!r}: unknown split {r.split!r}")
        if check_files:
            p = manifest.resolve(r)
            if not p.is_file() or not os.access(p, os.R_OK):
                violations.append(f"{r.image_id!r}: unreadable image file {str(p)!r}")
    return violations

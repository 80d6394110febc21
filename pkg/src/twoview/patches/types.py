from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class PatchError(ValueError):
    """Bad input image or an unsplittable stratum."""


@dataclass
class Patch:
    patch_id: str
    pixels: np.ndarray  # H x W x 3 uint8
    label: str
    view: str
    source_image_id: str
    specimen_id: str
    augmented_from: str | None = None
    split: str = "unassigned"

    @property
    def stratum(self) -> tuple[str, str]:
        return (self.label, self.view)

    def index_row(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "label": self.label,
            "view": self.view,
            "source_image_id": self.source_image_id,
            "specimen_id": self.specimen_id,
            "split": self.split,
            "augmented_from": self.augmented_from,
        }


@dataclass
class NormalizedPatch:
    values: np.ndarray  # H x W x 3 float64
    mean: np.ndarray  # per channel m_i
    std: np.ndarray  # per channel sigma_i (before flooring)
    floored: bool = False
    patch_id: str = ""
    label: str = ""
    view: str = ""
    specimen_id: str = ""


@dataclass
class PipelineConfig:
    patch_size: int = 256
    patches_per_image: int = 20
    target_per_class_per_view: int = 1000
    test_fraction: float = 0.20
    val_fraction: float = 0.1
    augmentation_variants: int = 7
    sigma_floor: float = 1e-6
    seed: int = 0
    leak_free: bool = True
    # foreground test
    background_color: tuple[int, int, int] = (0, 0, 0)
    background_tolerance: int = 10
    max_background_fraction: float = 0.8
    # augmentation ranges
    rotation_deg: float = 25.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_translate: float = 0.10
    perspective_jitter: float = 0.10
    jobs: int = 1

    def __post_init__(self) -> None:
        self.background_color = tuple(int(c) for c in self.background_color)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.patch_size < 8:
            raise ValueError(f"patch_size must be >= 8, got {self.patch_size}")
        for name in ("patches_per_image", "target_per_class_per_view", "augmentation_variants", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["background_color"] = list(self.background_color)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

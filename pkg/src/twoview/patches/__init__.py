"""Source images to balanced, split, augmented and whitened patch sets."""

from .augment import apply_transform, augment_patch
from .extract import decode_image, extract_patches
from .pipeline import build_patches, run_patchify
from .sampling import balance_classes, split_train_test
from .store import PatchStore, write_patch_store
from .types import NormalizedPatch, Patch, PatchError, PipelineConfig
from .whiten import whiten_patch

__all__ = [
    "NormalizedPatch",
    "Patch",
    "PatchError",
    "PatchStore",
    "PipelineConfig",
    "apply_transform",
    "augment_patch",
    "balance_classes",
    "build_patches",
    "decode_image",
    "extract_patches",
    "run_patchify",
    "split_train_test",
    "whiten_patch",
    "write_patch_store",
]

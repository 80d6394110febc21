"""Seed derivation shared by every stochastic step."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    """Child seed from a keyed hash of (master, keys...).

    Adding new step names never perturbs the seeds of existing ones.
    """
    h = hashlib.blake2b(digest_size=8, key=b"twoview-seed")
    h.update(str(int(master)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))

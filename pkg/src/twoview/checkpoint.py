"""Single-file checkpoint archive.

Layout::

    b"TWVCKPT1"                   8-byte magic
    uint64 little-endian          header length N
    N bytes                       JSON header (sorted keys, compact)
    payload                       raw little-endian tensors, concatenated

The header carries the model kind, configs, class set, dtype and, for every
tensor, its dtype, shape, payload offset, byte length and sha256 digest.
Nothing time-dependent is stored, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .nets import (
    BackboneConfig,
    ClassifierHead,
    FeatureExtractor,
    HeadConfig,
    MultiViewModel,
    SingleViewModel,
)

MAGIC = b"TWVCKPT1"
FORMAT_VERSION = 1

_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH_DTYPES = {"<f4": torch.float32, "<f8": torch.float64}


class CheckpointError(ValueError):
    pass


def _describe(model) -> dict:
    if isinstance(model, FeatureExtractor):
        return {"kind": "extractor", "backbone": model.config.to_json(), "frozen": model.frozen}
    if isinstance(model, SingleViewModel):
        return {
            "kind": "single_view",
            "backbone": model.extractor.config.to_json(),
            "head": model.head.config.to_json(),
            "frozen": model.extractor.frozen,
        }
    if isinstance(model, MultiViewModel):
        return {
            "kind": "multi_view",
            "backbone": model.branch_surface.config.to_json(),
            "head": model.head.config.to_json(),
            "fusion": model.fusion,
            "frozen": True,
        }
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def dumps_checkpoint(model, classes: list[str], meta: dict | None = None) -> bytes:
    header = _describe(model)
    header.update({"format_version": FORMAT_VERSION, "classes": list(classes), "meta": meta or {}})
    header["toolkit_version"] = __version__
    tensors, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        np_dtype = _NP_DTYPES[t.dtype]
        raw = t.detach().cpu().contiguous().numpy().astype(np_dtype, copy=False).tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": np_dtype,
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header["dtype"] = tensors[0]["dtype"] if tensors else "<f4"
    header["tensors"] = tensors
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(model, path: str | Path, classes: list[str], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(model, classes, meta))
    return path


def read_header(data: bytes) -> tuple[dict, int]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint archive (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')!r}")
    return header, 16 + n


def loads_checkpoint(data: bytes):
    """Rebuild the model from archive bytes; returns (model, header)."""
    header, base = read_header(data)
    state = {}
    for t in header["tensors"]:
        raw = data[base + t["offset"] : base + t["offset"] + t["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise CheckpointError(f"digest mismatch for tensor {t['name']!r}")
        arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(arr)
    dtype = _TORCH_DTYPES[header["dtype"]]
    backbone = BackboneConfig.from_json(header["backbone"])
    kind = header["kind"]
    if kind == "extractor":
        model = FeatureExtractor(backbone).to(dtype)
    elif kind == "single_view":
        model = SingleViewModel(FeatureExtractor(backbone), ClassifierHead(HeadConfig.from_json(header["head"]))).to(dtype)
    elif kind == "multi_view":
        a = FeatureExtractor(backbone).freeze()
        b = FeatureExtractor(backbone).freeze()
        model = MultiViewModel(a, b, header["fusion"], ClassifierHead(HeadConfig.from_json(header["head"]))).to(dtype)
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(state, strict=True)
    if header.get("frozen") and kind == "extractor":
        model.freeze()
    elif header.get("frozen") and kind == "single_view":
        model.extractor.freeze()
    model.eval()
    return model, header


def load_checkpoint(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads_checkpoint(path.read_bytes())

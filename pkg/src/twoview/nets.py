"""Backbones, classifier heads and late-fusion layers.

A backbone is described by a flat layer spec (a list of dicts) and ends at
the first dense layer after ``flatten``; that dense output is the per-branch
feature vector of length D. Everything after it belongs to the head.

All public forwards take channels-last batches (B x H x W x 3).
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

FUSIONS = ("concat", "maxpool")
FAMILIES = ("mini", "alexnet_like", "vgg16_like")


class LayerSpecError(ValueError):
    """A layer spec whose shapes do not line up."""


class ShapeError(ValueError):
    pass


def _conv(out_channels, kernel=3, stride=1, padding=1, bias=True):
    return {"type": "conv", "out_channels": out_channels, "kernel": kernel, "stride": stride, "padding": padding, "bias": bias}


def _pool(kernel=2, stride=2):
    return {"type": "maxpool", "kernel": kernel, "stride": stride}


RELU = {"type": "relu"}
FLATTEN = {"type": "flatten"}


def _dense(out_features, in_features=None, bias=True):
    d = {"type": "dense", "out_features": out_features, "bias": bias}
    if in_features is not None:
        d["in_features"] = in_features
    return d


@dataclass
class BackboneConfig:
    family: str
    input_size: int
    layers: list[dict] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return int(self.layers[-1]["out_features"])

    def to_json(self) -> dict:
        return {"family": self.family, "input_size": self.input_size, "layers": copy.deepcopy(self.layers)}

    @classmethod
    def from_json(cls, d: dict) -> "BackboneConfig":
        return cls(d["family"], int(d["input_size"]), copy.deepcopy(d["layers"]))


def mini_config(input_size: int = 64, feature_dim: int = 128, bias: bool = True) -> BackboneConfig:
    layers = []
    for ch in (16, 32, 64):
        layers += [_conv(ch, bias=bias), RELU, _pool()]
    layers += [FLATTEN, _dense(feature_dim, bias=bias)]
    return BackboneConfig("mini", input_size, layers)


def alexnet_like_config(input_size: int = 256, feature_dim: int = 4096) -> BackboneConfig:
    layers = [
        _conv(96, 11, 4, 2), RELU, _pool(3, 2),
        _conv(256, 5, 1, 2), RELU, _pool(3, 2),
        _conv(384), RELU, _conv(384), RELU, _conv(256), RELU, _pool(3, 2),
        FLATTEN, _dense(feature_dim),
    ]  # fmt: skip
    return BackboneConfig("alexnet_like", input_size, layers)


def vgg16_like_config(input_size: int = 256, feature_dim: int = 1024) -> BackboneConfig:
    layers: list[dict] = []
    for n, ch in ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)):
        for _ in range(n):
            layers += [_conv(ch), RELU]
        layers.append(_pool())
    layers += [FLATTEN, _dense(feature_dim)]
    return BackboneConfig("vgg16_like", input_size, layers)


def backbone_config(family: str, input_size: int | None = None, feature_dim: int | None = None) -> BackboneConfig:
    builders = {"mini": mini_config, "alexnet_like": alexnet_like_config, "vgg16_like": vgg16_like_config}
    if family not in builders:
        raise ValueError(f"unknown backbone family {family!r}; expected one of {FAMILIES}")
    kwargs = {}
    if input_size is not None:
        kwargs["input_size"] = input_size
    if feature_dim is not None:
        kwargs["feature_dim"] = feature_dim
    return builders[family](**kwargs)


def infer_shapes(layers: list[dict], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Output shape after every layer; raises LayerSpecError on the first inconsistency."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        kind = layer.get("type")
        where = f"layer {i} ({kind})"
        if kind == "conv":
            if len(shape) != 3:
                raise LayerSpecError(f"{where}: expects a C x H x W input, got {shape}")
            c, h, w = shape
            if layer.get("in_channels", c) != c:
                raise LayerSpecError(f"{where}: declares in_channels={layer['in_channels']} but receives {c}")
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
            oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise LayerSpecError(f"{where}: kernel {k} does not fit a {h}x{w} input")
            shape = (layer["out_channels"], oh, ow)
        elif kind == "maxpool":
            if len(shape) != 3:
                raise LayerSpecError(f"{where}: expects a C x H x W input, got {shape}")
            c, h, w = shape
            k, s = layer["kernel"], layer.get("stride", layer["kernel"])
            oh, ow = (h - k) // s + 1, (w - k) // s + 1
            if oh < 1 or ow < 1:
                raise LayerSpecError(f"{where}: window {k} does not fit a {h}x{w} input")
            shape = (c, oh, ow)
        elif kind in ("relu", "dropout"):
            pass
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise LayerSpecError(f"{where}: needs a flattened input, got {shape}")
            if layer.get("in_features", shape[0]) != shape[0]:
                raise LayerSpecError(
                    f"{where}: expects {layer['in_features']} inputs but the previous layer produces {shape[0]}"
                )
            shape = (layer["out_features"],)
        else:
            raise LayerSpecError(f"{where}: unknown layer type")
        shapes.append(shape)
    return shapes


def _make_layers(layers: list[dict], input_shape: tuple[int, ...]) -> nn.Sequential:
    shapes = infer_shapes(layers, input_shape)
    mods: list[nn.Module] = []
    prev = tuple(input_shape)
    for layer, out in zip(layers, shapes):
        kind = layer["type"]
        if kind == "conv":
            mods.append(
                nn.Conv2d(prev[0], layer["out_channels"], layer["kernel"], layer.get("stride", 1),
                          layer.get("padding", 0), bias=layer.get("bias", True))
            )  # fmt: skip
        elif kind == "maxpool":
            mods.append(nn.MaxPool2d(layer["kernel"], layer.get("stride", layer["kernel"])))
        elif kind == "relu":
            mods.append(nn.ReLU())
        elif kind == "dropout":
            mods.append(nn.Dropout(layer.get("p", 0.5)))
        elif kind == "flatten":
            mods.append(nn.Flatten())
        elif kind == "dense":
            mods.append(nn.Linear(prev[0], layer["out_features"], bias=layer.get("bias", True)))
        prev = out
    return nn.Sequential(*mods)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    g = torch.Generator().manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                w = torch.empty(m.weight.shape, dtype=torch.float64).uniform_(-bound, bound, generator=g)
                m.weight.copy_(w.to(m.weight.dtype))
                if m.bias is not None:
                    m.bias.zero_()


def _as_tensor(batch, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    return batch.to(dtype)


class FeatureExtractor(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        shapes = infer_shapes(config.layers, (3, config.input_size, config.input_size))
        if not config.layers or config.layers[-1]["type"] != "dense" or len(shapes[-1]) != 1:
            raise LayerSpecError("a backbone must end with a dense layer emitting the feature vector")
        if not any(l["type"] == "flatten" for l in config.layers):
            raise LayerSpecError("a backbone needs a flatten layer before its final dense layer")
        self.config = config
        self.net = _make_layers(config.layers, (3, config.input_size, config.input_size))
        self.frozen = False

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def forward(self, batch) -> torch.Tensor:
        x = _as_tensor(batch, self.dtype)
        s = self.config.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (s, s, 3):
            raise ShapeError(f"expected a B x {s} x {s} x 3 batch, got {tuple(x.shape)}")
        return self.net(x.permute(0, 3, 1, 2))


@dataclass
class HeadConfig:
    in_features: int
    num_classes: int
    layers: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"in_features": self.in_features, "num_classes": self.num_classes, "layers": copy.deepcopy(self.layers)}

    @classmethod
    def from_json(cls, d: dict) -> "HeadConfig":
        return cls(int(d["in_features"]), int(d["num_classes"]), copy.deepcopy(d["layers"]))


def default_head(in_features: int, num_classes: int, hidden: int = 64) -> HeadConfig:
    # the backbone ends in a linear layer, so the head opens with a ReLU
    layers = [RELU, _dense(hidden), RELU, _dense(num_classes)]
    return HeadConfig(in_features, num_classes, layers)


class ClassifierHead(nn.Module):
    def __init__(self, config: HeadConfig):
        super().__init__()
        layers = config.layers
        if not layers or layers[-1]["type"] != "dense" or layers[-1]["out_features"] != config.num_classes:
            raise LayerSpecError(f"head must end with a dense layer of {config.num_classes} outputs")
        if any(l["type"] not in ("dense", "relu", "dropout") for l in layers):
            raise LayerSpecError("head layers are limited to dense, relu and dropout")
        self.config = config
        self.net = _make_layers(layers, (config.in_features,))

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.config.in_features:
            raise ShapeError(f"head expects B x {self.config.in_features} features, got {tuple(features.shape)}")
        return self.net(features)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    z = logits - logits.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def forward_features(extractor: FeatureExtractor, batch) -> torch.Tensor:
    return extractor(batch)


def fuse(features_a: torch.Tensor, features_b: torch.Tensor, strategy: str) -> torch.Tensor:
    """Late fusion of two B x D feature batches.

    ``concat`` places the a-row before the b-row (2D wide); ``maxpool`` takes
    the elementwise maximum. Ties send the gradient to ``features_a``.
    """
    if features_a.shape != features_b.shape or features_a.ndim != 2:
        raise ShapeError(f"fusion needs two B x D inputs of equal shape, got {tuple(features_a.shape)} and {tuple(features_b.shape)}")
    if strategy == "concat":
        return torch.cat([features_a, features_b], dim=1)
    if strategy == "maxpool":
        return torch.where(features_a >= features_b, features_a, features_b)
    raise ValueError(f"unknown fusion strategy {strategy!r}; expected one of {FUSIONS}")


def classify(features: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return softmax(head(features))


class SingleViewModel(nn.Module):
    def __init__(self, extractor: FeatureExtractor, head: ClassifierHead):
        super().__init__()
        if head.config.in_features != extractor.feature_dim:
            raise ShapeError(f"head input {head.config.in_features} != feature dim {extractor.feature_dim}")
        self.extractor = extractor
        self.head = head

    def forward(self, batch) -> torch.Tensor:
        return self.head(self.extractor(batch))

    def representation(self, batch) -> torch.Tensor:
        return self.extractor(batch)


class MultiViewModel(nn.Module):
    """Two frozen copies of one extractor, a fusion layer and a trainable head.

    With ``concat`` fusion a dense layer maps the 2D fused vector back to D
    before the head; ``maxpool`` feeds the head directly.
    """

    def __init__(self, branch_surface: FeatureExtractor, branch_section: FeatureExtractor, fusion: str, head: ClassifierHead):
        super().__init__()
        if fusion not in FUSIONS:
            raise ValueError(f"unknown fusion strategy {fusion!r}")
        if not (branch_surface.frozen and branch_section.frozen):
            raise ValueError("multi-view branches must be frozen")
        d = branch_surface.feature_dim
        self.branch_surface = branch_surface
        self.branch_section = branch_section
        self.fusion = fusion
        self.fusion_dense = nn.Linear(2 * d, d) if fusion == "concat" else None
        if head.config.in_features != d:
            raise ShapeError(f"head input {head.config.in_features} != feature dim {d}")
        self.head = head

    @property
    def fused_dim(self) -> int:
        d = self.branch_surface.feature_dim
        return 2 * d if self.fusion == "concat" else d

    def branch_features(self, surface, section) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            return self.branch_surface(surface), self.branch_section(section)

    def fused(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        return fuse(fa, fb, self.fusion)

    def logits_from_features(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        z = self.fused(fa, fb)
        if self.fusion_dense is not None:
            z = self.fusion_dense(z)
        return self.head(z)

    def forward(self, surface, section) -> torch.Tensor:
        return self.logits_from_features(*self.branch_features(surface, section))

    def representation(self, surface, section) -> torch.Tensor:
        return self.fused(*self.branch_features(surface, section))

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def build_backbone(config: BackboneConfig, init_seed: int, dtype: torch.dtype = torch.float32) -> FeatureExtractor:
    ext = FeatureExtractor(config).to(dtype)
    init_parameters(ext, init_seed)
    return ext


def build_head(config: HeadConfig, init_seed: int, dtype: torch.dtype = torch.float32) -> ClassifierHead:
    head = ClassifierHead(config).to(dtype)
    init_parameters(head, init_seed)
    return head


def build_single_view(config: BackboneConfig, num_classes: int, init_seed: int, dtype=torch.float32,
                      head_config: HeadConfig | None = None) -> SingleViewModel:  # fmt: skip
    ext = build_backbone(config, init_seed, dtype)
    head_config = head_config or default_head(config.feature_dim, num_classes)
    return SingleViewModel(ext, build_head(head_config, init_seed + 1, dtype))


def duplicate(extractor: FeatureExtractor) -> FeatureExtractor:
    return copy.deepcopy(extractor)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

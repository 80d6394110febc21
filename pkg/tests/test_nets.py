import numpy as np
import pytest
import torch
from gradsuite import run_suite
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference, relative_error

from twoview.nets import (
    BackboneConfig,
    LayerSpecError,
    ShapeError,
    alexnet_like_config,
    build_backbone,
    build_head,
    build_single_view,
    classify,
    default_head,
    forward_features,
    fuse,
    mini_config,
    parameter_digest,
    vgg16_like_config,
)


def test_mini_feature_shape():
    ext = build_backbone(mini_config(64, 128), init_seed=0)
    out = forward_features(ext, np.random.default_rng(0).standard_normal((2, 64, 64, 3)))
    assert out.shape == (2, 128)


def test_same_seed_same_parameters():
    a = build_backbone(mini_config(), 5)
    b = build_backbone(mini_config(), 5)
    c = build_backbone(mini_config(), 6)
    assert parameter_digest(a) == parameter_digest(b) != parameter_digest(c)


def test_inconsistent_dense_layer_is_named():
    layers = [
        {"type": "conv", "out_channels": 16, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2, "stride": 2},
        {"type": "flatten"},
        {"type": "dense", "out_features": 64, "in_features": 4096},
    ]
    cfg = BackboneConfig("custom", 24, layers)  # 16 * 12 * 12 = 2304
    with pytest.raises(LayerSpecError, match=r"layer 4 \(dense\).*4096.*2304"):
        build_backbone(cfg, 0)


def test_forward_shape_mismatch():
    ext = build_backbone(mini_config(32), 0)
    with pytest.raises(ShapeError, match="expected a B x 32 x 32 x 3"):
        ext(torch.zeros(1, 64, 64, 3))


def test_zero_input_bias_free_network():
    ext = build_backbone(mini_config(32, bias=False), 1)
    assert torch.equal(ext(torch.zeros(3, 32, 32, 3)), torch.zeros(3, 128))


def test_batch_independence():
    ext = build_backbone(mini_config(32), 2)
    x = torch.randn(4, 32, 32, 3, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.allclose(ext(x[2:3]), ext(x)[2:3], atol=1e-6)


def test_conv_weight_gradient_matches_finite_difference():
    ext = build_backbone(mini_config(16, 8), 3, dtype=torch.float64)
    x = torch.randn(2, 16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    probe = torch.randn(2, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    w = ext.net[3].weight  # second conv
    loss = lambda: (ext(x) * probe).sum()  # noqa: E731
    loss().backward()
    sub = w.data[0, 0]  # one 3x3 kernel slice, by central differences
    with torch.no_grad():
        num = central_difference(loss, sub)
    assert relative_error(w.grad[0, 0], num) < 1e-4


def test_layer_gradients_small_suite():
    errors = run_suite(shapes_per_layer=5, seed=1)
    assert all(e < 1e-4 for e in errors.values()), errors


def test_fuse_examples():
    a, b = torch.tensor([[1.0, 2.0]]), torch.tensor([[2.0, 1.0]])
    assert fuse(a, b, "maxpool").tolist() == [[2.0, 2.0]]
    assert torch.equal(fuse(a, a, "maxpool"), a)
    assert fuse(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0, 4.0]]), "concat").tolist() == [[1, 2, 3, 4]]
    with pytest.raises(ShapeError):
        fuse(a, torch.zeros(1, 3), "concat")


def test_maxpool_tie_routes_gradient_to_first_input():
    a = torch.tensor([[1.0, 5.0]], requires_grad=True)
    b = torch.tensor([[1.0, 2.0]], requires_grad=True)
    fuse(a, b, "maxpool").sum().backward()
    assert a.grad.tolist() == [[1.0, 1.0]]
    assert b.grad.tolist() == [[0.0, 0.0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**31))
def test_fusion_algebra(b, d, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(b, d, generator=g), torch.randn(b, d, generator=g)
    assert torch.equal(fuse(x, y, "maxpool"), fuse(y, x, "maxpool"))
    assert torch.equal(fuse(x, x, "maxpool"), x)
    assert torch.equal(fuse(x, y, "concat")[:, :d], x)
    assert fuse(x, y, "concat").shape == (b, 2 * d)


def test_classify_rows_are_probabilities():
    head = build_head(default_head(16, 6), 0)
    z = torch.randn(10, 16, generator=torch.Generator().manual_seed(0)) * 30
    p = classify(z, head)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(dim=1), torch.ones(10), atol=1e-6)


def test_zeroed_final_layer_gives_uniform():
    head = build_head(default_head(16, 5), 0)
    with torch.no_grad():
        head.final.weight.zero_()
        head.final.bias.zero_()
    p = classify(torch.randn(4, 16), head)
    assert torch.allclose(p, torch.full((4, 5), 0.2), atol=1e-7)


def test_softmax_shift_invariance():
    from twoview.nets import softmax

    z = torch.randn(5, 6, generator=torch.Generator().manual_seed(3))
    assert torch.allclose(softmax(z), softmax(z + 123.0), atol=1e-6)


def test_classify_dimension_mismatch():
    head = build_head(default_head(16, 3), 0)
    with pytest.raises(ShapeError):
        classify(torch.zeros(2, 8), head)


@pytest.mark.parametrize("cfg", [mini_config(), alexnet_like_config(), vgg16_like_config()], ids=lambda c: c.family)
def test_shipped_configs_shape_contract(cfg):
    ext = build_backbone(cfg, 0)
    with torch.no_grad():
        out = ext(torch.randn(1, cfg.input_size, cfg.input_size, 3))
    assert out.shape == (1, cfg.feature_dim)


def test_single_view_model_output():
    m = build_single_view(mini_config(32), 4, init_seed=0)
    assert m(torch.randn(3, 32, 32, 3)).shape == (3, 4)

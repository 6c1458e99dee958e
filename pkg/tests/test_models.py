import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ressfl.errors import ConfigError, ShapeError
from ressfl.layers import Conv2D, Dense, Sequential
from ressfl.models import (DEFAULT_ARCH, TIERS, BottleneckConfig, build_inversion_model, build_split_classifier,
                           count_flops, insert_bottleneck, parse_arch, tier_width)


def kinds(net):
    return [layer.kind for layer in net]


def test_partition_without_pools():
    m = build_split_classifier("conv8-conv16-conv32-fc", 2, (1, 8, 8), 10)
    assert [k for k in kinds(m.client) if k in ("Conv2D", "Dense")] == ["Conv2D", "Conv2D"]
    assert kinds(m.server) == ["Conv2D", "ReLU", "Flatten", "Dense"]


def test_client_has_cut_layer_weighted_layers():
    for cut in (1, 2, 3):
        m = build_split_classifier(DEFAULT_ARCH, cut, (1, 16, 16), 10)
        assert sum(k in ("Conv2D", "Dense") for k in kinds(m.client)) == cut


@pytest.mark.parametrize("cut", [0, 4, -1])
def test_cut_out_of_range(cut):
    with pytest.raises(ConfigError):
        build_split_classifier(DEFAULT_ARCH, cut, (1, 16, 16), 10)


def test_split_transparency():
    x = np.random.default_rng(0).random((3, 1, 16, 16))
    a = build_split_classifier(DEFAULT_ARCH, 1, (1, 16, 16), 10, seed=4)
    b = build_split_classifier(DEFAULT_ARCH, 2, (1, 16, 16), 10, seed=4)
    ya = a.server.forward(a.client.forward(x))
    yb = b.server.forward(b.client.forward(x))
    assert np.array_equal(ya, yb)
    assert np.array_equal(ya, b.full().forward(x))


def test_activation_shape_28px():
    m = build_split_classifier(DEFAULT_ARCH, 2, (1, 28, 28), 10)
    assert m.client.forward(np.zeros((4, 1, 28, 28))).shape == (4, 16, 7, 7)


def test_arch_grammar():
    toks = parse_arch("conv8k5s2-pool-fc32-fc")
    assert (toks[0].channels, toks[0].kernel, toks[0].stride) == (8, 5, 2)
    for bad in ("", "conv", "fc-conv8", "pool-conv8", "conv8-fc-fc4"):
        with pytest.raises(ConfigError):
            parse_arch(bad)


def test_bottleneck_examples():
    m = build_split_classifier("conv16-conv16-fc", 1, (1, 8, 8), 10)
    b = insert_bottleneck(m, BottleneckConfig.parse("C8-S1"))
    l_in, l_out = b.client.layers[-4], b.client.layers[-2]
    assert (l_in.in_ch, l_in.out_ch, l_out.out_ch) == (16, 8, 16)
    assert b.activation_shape == (16, 8, 8)
    b2 = insert_bottleneck(m, BottleneckConfig(8, 2))
    assert b2.client.layers[-4].output_shape((16, 8, 8)) == (8, 4, 4)
    assert b2.activation_shape == (16, 4, 4)
    b2.validate()
    assert str(BottleneckConfig(8, 2)) == "C8-S2"
    with pytest.raises(ConfigError):
        insert_bottleneck(b, BottleneckConfig(8, 1))
    with pytest.raises(ConfigError):
        BottleneckConfig(8, 3)
    with pytest.raises(ConfigError):
        insert_bottleneck(m, BottleneckConfig(32, 1))


def test_bottleneck_identity_kernels_preserve_output():
    m = build_split_classifier("conv16-conv16-fc", 1, (1, 6, 6), 4, seed=1)
    x = np.random.default_rng(2).random((2, 1, 6, 6))
    ref = m.server.forward(m.client.forward(x))
    b = insert_bottleneck(m, BottleneckConfig(16, 1))
    for conv in (b.client.layers[-4], b.client.layers[-2]):
        w = np.zeros((16, 16, 3, 3))
        w[np.arange(16), np.arange(16), 1, 1] = 1.0
        conv.params["weight"].data = w
        conv.params["bias"].data[:] = 0
    assert np.allclose(b.server.forward(b.client.forward(x)), ref, atol=1e-12)


def test_bottleneck_spatial_too_small():
    m = build_split_classifier("conv4-fc", 1, (1, 1, 1), 3)
    b = insert_bottleneck(m, BottleneckConfig(2, 2))
    assert b.activation_shape[1:] == (1, 1)


def test_inversion_l0_structure():
    net = build_inversion_model("L0", (16, 8, 8), (1, 16, 16))
    assert kinds(net) == ["Conv2D", "ReLU", "Conv2D", "ReLU", "ConvTranspose2D", "Sigmoid"]
    out = net.forward(np.random.default_rng(0).normal(size=(2, 16, 8, 8)) * 10)
    assert out.shape == (2, 1, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_tier_width():
    assert tier_width("L3") == (6, 32)
    assert tier_width("L0") == (0, 8)


def test_inversion_errors():
    with pytest.raises(ShapeError):
        build_inversion_model("L0", (16, 3, 3), (1, 16, 16))
    with pytest.raises(ShapeError):
        build_inversion_model("L0", (16, 16, 16), (1, 48, 48))
    with pytest.raises(ConfigError):
        build_inversion_model("L9", (16, 4, 4), (1, 16, 16))


def test_flop_examples():
    assert count_flops(Dense(10, 5), (10,)) == 100
    assert count_flops(Conv2D(1, 1, 3, 1, 0), (1, 6, 6)) == 288
    assert count_flops(Sequential([]), (1, 4, 4)) == 0


@settings(max_examples=15, deadline=None)
@given(c=st.sampled_from([1, 4, 16]), h=st.sampled_from([1, 2, 4, 8]), f=st.sampled_from([1, 2, 4]),
       img_c=st.sampled_from([1, 3]))
def test_tier_flops_strictly_increase(c, h, f, img_c):
    flops = [count_flops(build_inversion_model(t, (c, h, h), (img_c, h * f, h * f)), (c, h, h)) for t in TIERS]
    assert all(a < b for a, b in zip(flops, flops[1:]))

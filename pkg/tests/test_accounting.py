import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onedconv.accounting import (LayerDescriptor, ModelGraph, build_model_graph, build_resnet18,
                                 build_tiny_cnn, count_buffers, count_flops, count_params,
                                 layer_params, layer_table, measured_flops, shape_conv_params)
from onedconv.nn import ConvSpec


def conv_layer(kind, cin, cout, k, h=32, w=32, stride=1):
    spec = ConvSpec(cin, cout, k, stride)
    return LayerDescriptor(kind, "c", spec, in_shape=(cin, h, w),
                           out_shape=(cout, *spec.output_size(h, w)))


def test_conv_param_examples():
    assert layer_params(conv_layer("conv", 3, 64, 3)) == 1792
    assert layer_params(conv_layer("onedconv", 3, 64, 3)) == 1792 + 2 * 28
    no_bias = LayerDescriptor("conv", "c", ConvSpec(3, 64, 3, has_bias=False),
                              in_shape=(3, 8, 8), out_shape=(64, 8, 8))
    assert layer_params(no_bias) == 1728


def test_empty_graph():
    g = ModelGraph("empty", (1, 32, 32), 10)
    assert count_params(g) == 0 and count_buffers(g) == 0 and layer_table(g) == []


def test_flop_example():
    assert count_flops(conv_layer("onedconv", 3, 64, 3)) == (3_670_016, 114_688)
    assert count_flops(conv_layer("conv", 3, 64, 3)) == (3_670_016, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(1, 64), st.sampled_from([1, 3, 5]), st.integers(1, 20),
       st.sampled_from([1, 2]))
def test_overhead_ratio(cin, cout, k, hw, stride):
    main, over = count_flops(conv_layer("onedconv", cin, cout, k, hw, hw, stride))
    assert over * cout == main * (k - 1)
    if k == 1:
        assert over == 0


def test_unresolved_layer_raises():
    bare = LayerDescriptor("conv", "c", ConvSpec(1, 1, 3))
    with pytest.raises(ValueError):
        layer_params(bare)
    with pytest.raises(ValueError):
        count_flops(bare)


@pytest.mark.parametrize("in_ch,vanilla,dynamic", [(3, 11_173_962, 11_235_106),
                                                   (1, 11_172_810, 11_233_918)])
def test_resnet18_counts(in_ch, vanilla, dynamic):
    gv = build_resnet18("vanilla", 10, (in_ch, 32, 32))
    gd = build_resnet18("onedconv", 10, (in_ch, 32, 32))
    assert count_params(gv) == vanilla
    assert count_params(gd) == dynamic
    replaced = [l.spec for l in gd.leaves() if l.kind == "onedconv"]
    assert len(replaced) == 17
    assert count_params(gd) - count_params(gv) == sum(shape_conv_params(s) for s in replaced)


def test_resnet18_default_input_has_three_channels():
    assert build_resnet18().input_shape == (3, 32, 32)
    assert build_model_graph("resnet18", "vanilla").input_shape == (3, 32, 32)


def test_tiny_cnn_hand_sum():
    # conv1 1*9*16, bn1 32, conv2 16*9*32, bn2 64, fc 32*8*8*10 + 10
    vanilla = 144 + 32 + 4608 + 64 + 20480 + 10
    assert count_params(build_tiny_cnn("vanilla")) == vanilla
    extra = 2 * (9 * 1 + 1) + 2 * (9 * 16 + 1)
    assert count_params(build_tiny_cnn("onedconv")) == vanilla + extra


def test_bn_buffers():
    assert count_buffers(build_resnet18("vanilla")) == 9600


def test_unknown_names():
    with pytest.raises(ValueError):
        build_model_graph("vgg", "vanilla")
    with pytest.raises(ValueError):
        build_tiny_cnn("deformable")


def test_json_round_trip():
    g = build_resnet18("onedconv")
    back = ModelGraph.from_json(g.to_json())
    assert back == g
    assert count_params(back) == count_params(g)


def test_every_resnet_conv_ratio():
    for variant in ("vanilla", "onedconv"):
        for layer in build_resnet18(variant).leaves():
            if layer.kind in ("conv", "onedconv"):
                main, over = count_flops(layer)
                k, cout = layer.spec.kernel, layer.spec.out_channels
                expect = main * (k - 1) // cout if layer.kind == "onedconv" else 0
                assert over == expect


@pytest.mark.parametrize("stride", [1, 2])
def test_measured_matches_closed_form(stride):
    x = np.random.default_rng(0).standard_normal((1, 2, 5, 5))
    for kind in ("conv", "onedconv"):
        layer = conv_layer(kind, 2, 4, 3, 5, 5, stride)
        main, over = count_flops(layer)
        m = measured_flops(layer, x)
        assert (m.main, m.overhead) == (main, over)
        assert (m.interpolation > 0) == (kind == "onedconv")


def test_measured_output_matches_operator():
    from onedconv import ConvWeights, ShapeConvWeights, onedconv_forward
    r = np.random.default_rng(3)
    layer = conv_layer("onedconv", 2, 3, 3, 6, 6)
    x = r.standard_normal((1, 2, 6, 6))
    w = (r.standard_normal((3, 2, 3, 3)), r.standard_normal(3),
         r.uniform(-0.3, 0.3, (2, 2, 3, 3)), r.uniform(-0.3, 0.3, 2))
    _, y = measured_flops(layer, x, w, return_output=True)
    ref, _ = onedconv_forward(x, layer.spec, ConvWeights(*w[:2]), ShapeConvWeights(*w[2:]))
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_non_conv_layers_have_no_flops():
    assert count_flops(LayerDescriptor("relu", "r", in_shape=(1, 2, 2), out_shape=(1, 2, 2))) == (0, 0)

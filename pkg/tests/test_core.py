import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coexplore.core import (
    CONV,
    CONV_CHAIN,
    FIXED1,
    MBCONV,
    ChildNetwork,
    FpgaPool,
    LayerSpec,
    SearchSpace,
    ShapeUnderflow,
    TensorShape,
    XC7Z015,
    canonical_key,
    count_macs,
    count_params,
    derive_shapes,
    network_from_key,
)


def net_of(*layers, shape=(32, 32, 3)):
    return ChildNetwork(TensorShape(*shape), tuple(layers))


def naive_conv_macs(h, w, c_in, filters, k, stride):
    # Count one MAC per (output pixel, output channel, kernel tap, input channel).
    total = 0
    for _ in range(-(-h // stride)):
        for _ in range(-(-w // stride)):
            total += filters * k * k * c_in
    return total


class TestShapes:
    def test_stride_one_keeps_spatial(self, conv):
        assert derive_shapes(net_of(conv(24, 3, 1))) == [TensorShape(32, 32, 24)]

    def test_stride_two_halves(self, conv):
        assert derive_shapes(net_of(conv(24, 3, 2))) == [TensorShape(16, 16, 24)]

    def test_ceil_never_reaches_zero(self, conv):
        shapes = derive_shapes(net_of(*[conv(8, 3, 2)] * 4, shape=(4, 4, 3)))
        assert [(s.height, s.width) for s in shapes] == [(2, 2), (1, 1), (1, 1), (1, 1)]

    def test_invalid_shape_raises(self):
        with pytest.raises(ShapeUnderflow):
            TensorShape(0, 4, 3)


class TestCounts:
    def test_conv_macs(self, conv):
        assert count_macs(conv(24, 3, 1), TensorShape(32, 32, 3)) == 663_552

    def test_pointwise_on_single_pixel(self, conv):
        assert count_macs(conv(48, 1, 1), TensorShape(1, 1, 5)) == 48 * 5

    def test_conv_macs_match_loop_count(self, conv):
        for f, k, s in itertools.product((24, 36), (1, 3, 5), (1, 2)):
            assert count_macs(conv(f, k, s), TensorShape(9, 7, 4)) == naive_conv_macs(9, 7, 4, f, k, s)

    def test_mbconv_macs(self):
        layer = LayerSpec(MBCONV, 16, 3, 1, 3)
        # expand 8*8*8*24, depthwise 8*8*24*9, project 8*8*24*16
        assert count_macs(layer, TensorShape(8, 8, 8)) == 12_288 + 13_824 + 24_576 == 50_688

    def test_mbconv_macs_match_stagewise_loops(self):
        layer = LayerSpec(MBCONV, 16, 5, 2, 6)
        h = w = 7
        c = 4
        hidden = 6 * c
        expand = naive_conv_macs(h, w, c, hidden, 1, 1)
        depthwise = naive_conv_macs(h, w, 1, hidden, 5, 2)
        project = naive_conv_macs(-(-h // 2), -(-w // 2), hidden, 16, 1, 1)
        assert count_macs(layer, TensorShape(h, w, c)) == expand + depthwise + project

    def test_conv_params(self, conv):
        assert count_params(net_of(conv(24, 3, 1))) == 672

    def test_deep_conv_params_by_weight_tensors(self, conv):
        net = net_of(*[conv(64, 7, 1)] * 4)
        shapes = [(7, 7, 3, 64), (64,)] + [(7, 7, 64, 64), (64,)] * 3
        assert count_params(net) == sum(int(np.prod(s)) for s in shapes) == 611_776

    def test_mbconv_params(self):
        net = ChildNetwork(TensorShape(8, 8, 8), (LayerSpec(MBCONV, 16, 3, 1, 3),))
        assert count_params(net) == 8 * 24 + 24 * 9 + 24 * 16 + 24 + 24 + 16


class TestKey:
    def test_format(self, conv):
        net = net_of(conv(24, 3, 1), conv(36, 5, 2))
        assert canonical_key(net) == "ConvChain|32x32x3|24,3,1,1;36,5,2,1"

    def test_equal_nets_equal_keys(self, conv):
        assert canonical_key(net_of(conv(24, 3), conv(36, 5))) == canonical_key(net_of(conv(24, 3), conv(36, 5)))

    def test_stride_changes_key(self, conv):
        assert canonical_key(net_of(conv(24, 3, 1))) != canonical_key(net_of(conv(24, 3, 2)))

    def test_round_trip(self):
        net = ChildNetwork(TensorShape(224, 224, 3), (LayerSpec(MBCONV, 32, 5, 2, 6), LayerSpec(MBCONV, 16, 3, 1, 3)))
        assert network_from_key(canonical_key(net)) == net


class TestSearchSpace:
    def test_fixed1_requires_unit_stride(self):
        with pytest.raises(ValueError):
            SearchSpace(CONV_CHAIN, 3, (24,), (3,), (1, 2), stride_mode=FIXED1)

    def test_decisions_conv(self):
        assert [n for n, _ in SearchSpace.cifar().decisions()] == ["filter", "kernel", "stride"]

    def test_decisions_mbconv(self):
        assert [n for n, _ in SearchSpace.imagenet().decisions()] == ["filter", "kernel", "stride", "expansion"]

    def test_enumerate_count(self, tiny_space):
        nets = list(tiny_space.enumerate())
        assert len(nets) == tiny_space.size() == 8 ** 4
        assert len({canonical_key(n) for n in nets}) == len(nets)

    def test_index_round_trip(self, tiny_space):
        rng = np.random.default_rng(3)
        for _ in range(20):
            net = tiny_space.random_network(rng)
            idx = [tiny_space.layer_to_indices(layer) for layer in net.layers]
            assert tiny_space.network(idx) == net
            assert tiny_space.contains(net)

    def test_pool_rejects_duplicate_names(self):
        with pytest.raises(ValueError):
            FpgaPool(((XC7Z015, 1), (XC7Z015, 2)))


layer_st = st.builds(
    lambda f, k, s: LayerSpec(CONV, f, k, s),
    st.sampled_from([24, 36, 48, 64]), st.sampled_from([1, 3, 5, 7]), st.sampled_from([1, 2]))
net_st = st.lists(layer_st, min_size=1, max_size=6).map(lambda ls: net_of(*ls))


@given(net_st)
def test_shape_count_equals_depth(net):
    assert len(derive_shapes(net)) == net.depth


@given(net_st, st.data())
def test_raising_a_stride_never_grows_downstream(net, data):
    i = data.draw(st.integers(0, net.depth - 1))
    layers = list(net.layers)
    layers[i] = LayerSpec(CONV, layers[i].filters, layers[i].kernel, 2)
    before = derive_shapes(net)
    after = derive_shapes(ChildNetwork(net.input, tuple(layers)))
    for a, b in zip(after, before):
        assert a.height <= b.height and a.width <= b.width


@given(net_st, st.data())
def test_counts_strictly_increase_in_filters(net, data):
    i = data.draw(st.integers(0, net.depth - 1))
    layers = list(net.layers)
    bigger = list(layers)
    bigger[i] = LayerSpec(CONV, layers[i].filters + 8, layers[i].kernel, layers[i].stride)
    big = ChildNetwork(net.input, tuple(bigger))
    assert count_params(big) > count_params(net)
    shape_in = net.layer_inputs()[i]
    assert count_macs(bigger[i], shape_in) > count_macs(layers[i], shape_in)


@settings(max_examples=200)
@given(net_st, net_st)
def test_key_equality_iff_structural_equality(a, b):
    assert (canonical_key(a) == canonical_key(b)) == (a == b)

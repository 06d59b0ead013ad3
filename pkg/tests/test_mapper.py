
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pimforge import trainer
from pimforge.admm import layer_quant_specs, quantize_model
from pimforge.bitserial import bitwise_conv2d
from pimforge.mapper import (
    LUT,
    PHYSICAL,
    LayoutError,
    PimLayout,
    build_layout,
    layout_stats,
    propagate_pruning,
    simulate,
    simulate_layer,
)
from pimforge.model import Layer, Model, QuantSpec, models_equal
from pimforge.quantization import weights_to_int

from conftest import random_model

Q8 = QuantSpec(8, 8, 0, True, 5)


def quantized(model, spec=Q8):
    return quantize_model(model, layer_quant_specs(model, spec))


def single_layer(w, input_hw=(5, 5), spec=Q8):
    w = np.asarray(w, dtype=float)
    m = Model([Layer(w, np.zeros(w.shape[0]), pool=False)], (w.shape[1],) + input_hw)
    return quantized(m, spec)


def count_subarrays(layout, i=0):
    return sum(len(pe.weight_subarrays) for pe in layout.layers[i].pes)


def test_dense_layer_counts(rng):
    layout = build_layout(single_layer(rng.normal(size=(4, 3, 2, 2))))
    assert len(layout.layers[0].pes) == 3
    assert count_subarrays(layout) == 12
    assert all(pe.channel == i for i, pe in enumerate(layout.layers[0].pes))


def test_channel_pruning_removes_pe(rng):
    w = rng.normal(size=(4, 3, 2, 2))
    w[:, 1] = 0
    m = single_layer(w)
    assert len(build_layout(m, PHYSICAL).layers[0].pes) == 2
    lut = build_layout(m, LUT).layers[0]
    assert len(lut.pes) == 3 and lut.pes[1].skip_lut == [True] * 4 and lut.pes[1].is_idle


def test_mixed_pruning_count(rng):
    w = rng.normal(size=(4, 3, 2, 2))
    w[2] = 0  # filter
    w[:, 0] = 0  # channel
    w[0, 1] = 0
    w[3, 2] = 0  # two extra kernels
    m = single_layer(w)
    assert count_subarrays(build_layout(m, PHYSICAL)) == 3 * 2 - 2
    lut = build_layout(m, LUT)
    assert count_subarrays(lut) == 12
    assert sum(sum(pe.skip_lut) for pe in lut.layers[0].pes) == 8


def test_subarray_shape_3bit_2x2(rng):
    layout = build_layout(single_layer(rng.normal(size=(1, 1, 2, 2)), spec=QuantSpec(3, 3, 0, True, 2)))
    sub = layout.layers[0].pes[0].weight_subarrays[0]
    assert (sub.rows, sub.cols) == (3, 4)
    assert layout.layers[0].pes[0].input_subarray.rows == 3


def test_lenet_conv2_stats(rng):
    layout = build_layout(single_layer(rng.normal(size=(16, 6, 5, 5)), input_hw=(14, 14)))
    stats = layout_stats(layout)
    assert stats["pes"] == 6 and stats["weight_subarrays"] == 96
    assert stats["layers"][0]["subarray_shape"] == [8, 25]


def test_rows_scale_with_bits(rng):
    w = rng.normal(size=(4, 3, 2, 2))
    rows8 = layout_stats(build_layout(single_layer(w, spec=QuantSpec(8, 8, 0, True, 5))))["weight_rows"]
    rows4 = layout_stats(build_layout(single_layer(w, spec=QuantSpec(4, 8, 0, True, 5))))["weight_rows"]
    assert rows8 == 2 * rows4


def test_lut_reports_raw_and_effective(rng):
    w = rng.normal(size=(4, 3, 2, 2))
    w[1] = 0
    stats = layout_stats(build_layout(single_layer(w), LUT))
    assert stats["weight_subarrays"] == 12 and stats["weight_subarrays_effective"] == 9
    phys = layout_stats(build_layout(single_layer(w), PHYSICAL))
    assert phys["weight_subarrays"] == phys["weight_subarrays_effective"] == 9


def test_unquantized_model_rejected(small_model):
    with pytest.raises(LayoutError, match="not quantized"):
        build_layout(small_model)


def test_off_grid_weights_rejected(small_model):
    m = quantized(small_model)
    m.layers[1].weights[0, 0, 0, 0] += 1e-3
    with pytest.raises(LayoutError, match="layer 1"):
        build_layout(m)


def test_fully_pruned_layer_warns(rng):
    m = single_layer(np.zeros((2, 2, 2, 2)))
    layout = build_layout(m, LUT)
    with pytest.warns(RuntimeWarning, match="fully pruned"):
        out, tr = simulate_layer(layout, 0, rng.integers(0, 256, size=(2, 5, 5)))
    assert not out.any() and tr.and_ops == 0


def test_layer_matches_engine(rng):
    w = rng.normal(size=(3, 2, 3, 3))
    w[0, 1] = 0
    m = single_layer(w, input_hw=(6, 6))
    x = rng.integers(0, 256, size=(2, 6, 6))
    wi = weights_to_int(m.layers[0].weights, m.layers[0].quant)
    ref, ref_tr = bitwise_conv2d(x, wi, input_bits=8, weight_bits=7, active=wi.reshape(3, 2, -1).any(axis=2))
    for mode in (PHYSICAL, LUT):
        out, tr = simulate_layer(build_layout(m, mode), 0, x)
        assert np.array_equal(out, ref)
        assert tr.to_dict() == ref_tr.to_dict()


def test_layer_input_range_checked(rng):
    layout = build_layout(single_layer(rng.normal(size=(1, 1, 2, 2))))
    with pytest.raises(LayoutError, match="outside"):
        simulate_layer(layout, 0, np.full((1, 5, 5), 256))


def pruned_model(seed, bias_scale=0.1):
    rng = np.random.default_rng(seed)
    m = random_model(seed, bias_scale=bias_scale)
    m.layers[0].weights[rng.integers(4)] = 0
    m.layers[1].weights[:, rng.integers(4)] = 0
    m.layers[1].weights[rng.integers(6)] = 0
    m.layers[1].weights[rng.random((6, 4)) < 0.2] = 0
    return m


def test_end_to_end_bit_exact_both_modes(rng):
    m = quantized(pruned_model(3))
    x = rng.uniform(0, 1, size=(20, 1, 10, 10))
    ref = trainer.quantized_forward(m, x)
    phys, lut = simulate(build_layout(m, PHYSICAL), x), simulate(build_layout(m, LUT), x)
    assert np.array_equal(phys.logits, ref) and np.array_equal(lut.logits, ref)
    assert [t.to_dict() for t in phys.traces] == [t.to_dict() for t in lut.traces]


def test_count_conservation(rng):
    m = quantized(pruned_model(5))
    layout = build_layout(m, PHYSICAL)
    for L, layer in zip(layout.layers, m.layers):
        nz = int(layer.weights.reshape(layer.weights.shape[0], layer.weights.shape[1], -1).any(axis=2).sum())
        assert sum(len(pe.weight_subarrays) for pe in L.pes) == nz


def test_layout_round_trip(rng):
    layout = build_layout(quantized(pruned_model(2)), LUT)
    doc = layout.to_dict()
    assert PimLayout.from_dict(doc).to_dict() == doc
    doc["layers"][0]["pes"][0]["skip_lut"][0] = not doc["layers"][0]["pes"][0]["skip_lut"][0]
    with pytest.raises(LayoutError):
        PimLayout.from_dict(doc)


def test_propagate_dense_unchanged(small_model):
    assert models_equal(propagate_pruning(small_model), small_model)


def test_propagate_filter_to_next_channel(small_model):
    small_model.layers[0].weights[2] = 0
    out = propagate_pruning(small_model)
    assert not out.layers[1].weights[:, 2].any()
    assert out.layers[1].weights[:, [0, 1, 3]].all()


def test_propagate_channel_to_previous_filter(small_model):
    small_model.layers[1].weights[:, 1] = 0
    out = propagate_pruning(small_model)
    assert not out.layers[0].weights[1].any() and out.layers[0].biases[1] == 0


def test_propagate_through_flatten(small_model):
    small_model.layers[1].weights[4] = 0
    out = propagate_pruning(small_model)
    fc = out.layers[2].weights.reshape(5, 6, -1)
    assert not fc[:, 4].any() and fc[:, 3].all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_propagate_preserves_function_real(seed):
    m = pruned_model(seed, bias_scale=0.5)
    x = np.random.default_rng(seed).normal(size=(100, 1, 10, 10))
    before = trainer.forward(m, x)
    after = trainer.forward(propagate_pruning(m), x)
    assert np.allclose(after, before, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_propagate_preserves_function_quantized(seed):
    m = quantized(pruned_model(seed))
    # filters that end up dead get a nonpositive bias so they emit exactly zero
    # and no bias folding (with its different float summation order) is involved
    while True:
        p = propagate_pruning(m)
        dead = [~p.layers[i].weights.any(axis=(1, 2, 3)) & (m.layers[i].biases > 0)
                for i in range(m.num_layers - 1)]
        if not any(d.any() for d in dead):
            break
        for i, d in enumerate(dead):
            m.layers[i].biases[d] *= -1
    x = np.random.default_rng(seed).uniform(0, 2, size=(100, 1, 10, 10))
    assert np.array_equal(trainer.quantized_forward(propagate_pruning(m), x), trainer.quantized_forward(m, x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_more_pruning_never_costs_more(seed):
    rng = np.random.default_rng(seed)
    m = quantized(pruned_model(seed))
    more = m.copy()
    li = int(rng.integers(2))
    f, c = more.layers[li].weights.shape[:2]
    more.layers[li].weights[rng.integers(f), rng.integers(c)] = 0
    x = rng.uniform(0, 1, size=(1, 1, 10, 10))
    a, b = build_layout(m), build_layout(more)
    sa, sb = layout_stats(a), layout_stats(b)
    assert sb["pes"] <= sa["pes"] and sb["weight_subarrays"] <= sa["weight_subarrays"]
    assert simulate(b, x).total.and_ops <= simulate(a, x).total.and_ops

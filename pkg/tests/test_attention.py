import numpy as np
import pytest

from tdformer.analysis import prop41_bound, tight_bound
from tdformer.attention import (AttentionConfig, attend, make_qkv, pm_spatial_attention, qk_attention, sdsa1, sdsa2,
                                spatial_map, ssa)
from tdformer.errors import ConfigurationError, DimensionError
from tdformer.layers import record_activity
from tdformer.neuron import LifConfig, run_sequence
from tdformer.tensor import Node, SpikeTensor
from tdformer.topdown import ControlModule


def _spikes(bits):
    return SpikeTensor.from_bits(np.asarray(bits, dtype=float))


def _random_spikes(rng, shape, rate=0.3):
    return _spikes(rng.random(shape) < rate)


def test_token_attention_gate_passes_keys():
    q = _spikes([[[1, 0], [1, 1]]])
    k = _spikes([[[0, 1], [1, 0]]])
    out = qk_attention(q, k, "token")
    assert np.array_equal(out.bits, k.bits)


def test_token_attention_silent_query_blocks_token():
    q = _spikes([[[0, 0], [1, 1]]])
    k = _spikes([[[1, 1], [1, 1]]])
    out = qk_attention(q, k, "token")
    assert out.bits.tolist() == [[[0, 0], [1, 1]]]


def test_sdsa1_full_column_returns_query(rng):
    q = _random_spikes(rng, (1, 3, 4))
    ones = _spikes(np.ones((1, 3, 4)))
    assert np.array_equal(sdsa1(q, ones, ones).bits, q.bits)


def test_ssa_zero_inputs_stay_silent():
    zero = _spikes(np.zeros((2, 1, 4, 3)))
    out = ssa(zero, zero, zero, 0.125)
    assert out.shape == (2, 1, 4, 3)
    assert not out.bits.any()


def test_spatial_map_clamps_channel_sum():
    x = _spikes(np.ones((1, 1, 2, 3)))
    m = spatial_map(x, Node(np.ones(3)), 0.0, 1.5)
    assert m.shape == (1, 1, 2, 1)
    assert np.all(m.values == 1.5)
    out = pm_spatial_attention(x, Node(np.ones(3)), 0.0, 1.5, LifConfig(v_th=0.5))
    assert out.firing_rate == 1.0


def test_spatial_map_rejects_bad_inputs():
    x = _spikes(np.ones((1, 1, 2, 3)))
    with pytest.raises(DimensionError):
        spatial_map(x, Node(np.ones(4)), 0.0, 1.5)
    with pytest.raises(ConfigurationError):
        spatial_map(x, Node(np.ones(3)), 1.5, 1.5)


def _macs(kind, tokens, rng):
    shape = (1, 1, tokens, 4)
    q, k, v = (_random_spikes(rng, shape) for _ in range(3))
    with record_activity() as recorder:
        if kind == "ssa":
            ssa(q, k, v, 0.125, name="attn")
        else:
            qk_attention(q, k, "token", name="attn")
    return recorder.blocks["attn"]["macs"]


def test_operation_count_scaling(rng):
    assert _macs("ssa", 16, rng) == 4 * _macs("ssa", 8, rng)
    assert _macs("qk", 16, rng) == 2 * _macs("qk", 8, rng)


def test_multi_head_attention_keeps_shape(rng):
    shape = (2, 3, 5, 8)
    q, k, v = (_random_spikes(rng, shape) for _ in range(3))
    for kind, scale in (("ssa", 0.125), ("sdsa1", None), ("qkca", None)):
        out = attend(q, k, v, AttentionConfig(kind=kind, scale=scale, heads=2))
        assert out.shape == shape


@pytest.mark.parametrize("kwargs", [{"kind": "softmax"}, {"kind": "ssa"}, {"kind": "qkta", "scale": 0.5},
                                    {"kind": "ssa", "scale": 0.1, "heads": 0}])
def test_invalid_attention_settings(kwargs):
    with pytest.raises(ConfigurationError):
        AttentionConfig(**kwargs)


def test_heads_must_divide_channels(rng):
    q = _random_spikes(rng, (1, 1, 2, 6))
    with pytest.raises(ConfigurationError):
        attend(q, q, q, AttentionConfig(kind="ssa", scale=0.1, heads=4))


def test_ssa_two_token_example():
    q = _spikes([[[[1, 0], [1, 1]]]])
    k = _spikes([[[[1, 1], [0, 1]]]])
    v = _spikes([[[[1, 0], [0, 1]]]])
    # Q K^T V = [[1, 0], [2, 1]]
    assert ssa(q, k, v, 1.0).bits[0, 0].tolist() == [[1, 0], [1, 1]]
    assert ssa(q, k, v, 0.5).bits[0, 0].tolist() == [[0, 0], [1, 0]]


def test_sdsa2_at_unit_scale_equals_ssa(rng):
    q, k, v = (_random_spikes(rng, (3, 2, 5, 4), rate=0.4) for _ in range(3))
    assert np.array_equal(sdsa2(q, k, v, 1.0).bits, ssa(q, k, v, 1.0).bits)


def test_sdsa2_fires_less_as_scale_grows(rng):
    q, k, v = (_random_spikes(rng, (1, 4, 6, 4), rate=0.5) for _ in range(3))
    outputs = [sdsa2(q, k, v, s).bits for s in (0.5, 1.0, 2.0, 4.0)]
    for looser, stricter in zip(outputs, outputs[1:]):
        assert np.all(stricter <= looser)
    assert outputs[0].sum() > outputs[-1].sum()


def test_scaled_attention_norm_is_applied_before_firing(rng):
    q, k, v = (_random_spikes(rng, (2, 1, 4, 4)) for _ in range(3))
    silent = ssa(q, k, v, 0.125, norm=lambda node: Node(np.zeros(node.shape)))
    loud = sdsa2(q, k, v, 0.5, norm=lambda node: Node(np.full(node.shape, 10.0)))
    assert not silent.bits.any()
    assert loud.firing_rate == 1.0


def test_make_qkv_is_linear_batch_norm_lif(rng):
    lif = LifConfig()
    weights = ControlModule(rng, 4, lif)
    s = _random_spikes(rng, (3, 2, 5, 4), rate=0.5)
    outputs = make_qkv(s, weights, training=True)
    for key, out in zip(("q", "k", "v"), outputs):
        projection = weights[key]
        pre = s.bits @ projection.linear.weight.values
        mean = pre.mean(axis=(0, 1, 2))
        var = pre.var(axis=(0, 1, 2))
        x_hat = (pre - mean) * (1.0 / np.sqrt(var + 1e-5))
        normed = projection.bn.gamma.values * x_hat + projection.bn.beta.values
        expected = run_sequence(Node(normed), lif)
        assert np.array_equal(out.bits, expected.bits)


def test_make_qkv_skips_missing_value(rng):
    weights = ControlModule(rng, 4, LifConfig(), use_value=False)
    q, k, v = make_qkv(_random_spikes(rng, (2, 1, 3, 4)), weights)
    assert q.shape == k.shape == (2, 1, 3, 4)
    assert v is None


def test_channel_attention_gates_channels_by_query_sum():
    q = _spikes([[[1, 0], [1, 0], [0, 0]]])
    k = _spikes(np.ones((1, 3, 2)))
    # column sums of Q are [2, 0], so only the first channel passes
    out = qk_attention(q, k, "channel")
    assert out.bits.tolist() == [[[1, 0], [1, 0], [1, 0]]]


def test_qk_attention_rejects_unknown_mode():
    q = _spikes(np.ones((1, 2, 2)))
    with pytest.raises(ConfigurationError) as err:
        qk_attention(q, q, "diagonal")
    assert err.value.field == "mode"


@pytest.mark.parametrize("a, b, rate", [(1.5, 0.0, 0.1), (1.5, 0.2, 0.3), (2.0, 0.5, 0.6), (1.0, 0.0, 0.05)])
def test_spatial_attention_variance_within_bound(a, b, rate, rng):
    x = _random_spikes(rng, (4, 64, 16, 32), rate=rate)
    w_c = Node(rng.normal(0.0, 3.0 / np.sqrt(32), size=32))
    m = spatial_map(x, w_c, b, a).values
    y = x.bits * m
    f = float(x.bits.mean())
    assert np.all((m >= b) & (m <= a))
    assert y.var() <= tight_bound(a, b, f) + 1e-12
    assert tight_bound(a, b, f) <= prop41_bound(a, b, f) + 1e-12

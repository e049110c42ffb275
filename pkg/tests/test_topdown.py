import logging

import numpy as np
import pytest

from tdformer.attention import pm_spatial_attention
from tdformer.errors import ConfigurationError, DimensionError
from tdformer.model import ModelConfig, TDFormer, tdformer_loss
from tdformer.neuron import LifConfig
from tdformer.tensor import Node, SpikeTensor, take
from tdformer.topdown import (ControlModule, FeedbackSignal, ProcessingModule, SubnetSchedule,
                              align_feedback, control_module, default_alphas, processing_module)

SMALL = dict(T=4, n_sub=2, image_size=4, embed_channels=8, heads=2, depth=1)


def _spikes(rng, shape, rate=0.4):
    return SpikeTensor.from_bits((rng.random(shape) < rate).astype(float))


def _images(seed, batch=4, T=4):
    return np.random.default_rng(seed).random((batch, T, 1, 4, 4))


def test_missing_feedback_equals_zero_feedback(rng):
    weights = ControlModule(rng, 4, LifConfig(), "CM3")
    s_bu = _spikes(rng, (2, 3, 5, 4))
    zero = SpikeTensor.from_bits(np.zeros(s_bu.shape))
    for absent, silent in zip(control_module(s_bu, None, "CM3", weights),
                              control_module(s_bu, zero, "CM3", weights)):
        assert np.array_equal(absent.bits, silent.bits)


def test_cm1_fuses_into_keys_only(rng):
    weights = ControlModule(rng, 4, LifConfig(), "CM1")
    assert list(weights.td_weights) == ["k"]
    s_bu = _spikes(rng, (2, 3, 5, 4))
    s_td = _spikes(rng, (2, 3, 5, 4), rate=0.9)
    q0, _, v0 = control_module(s_bu, None, "CM1", weights)
    q1, _, v1 = control_module(s_bu, s_td, "CM1", weights)
    assert np.array_equal(q0.bits, q1.bits)
    assert np.array_equal(v0.bits, v1.bits)


def test_control_module_checks_feedback_shape(rng):
    weights = ControlModule(rng, 4, LifConfig(), "CM1")
    with pytest.raises(DimensionError):
        control_module(_spikes(rng, (2, 3, 5, 4)), _spikes(rng, (2, 3, 6, 4)), "CM1", weights)
    with pytest.raises(ConfigurationError):
        control_module(_spikes(rng, (2, 3, 5, 4)), None, "CM2", weights)


def test_shorter_feedback_repeats_last_step(rng):
    s_td = _spikes(rng, (2, 1, 3, 4))
    aligned = align_feedback(FeedbackSignal(s_td, 0), 3)
    assert aligned.shape == (3, 1, 3, 4)
    for t in range(3):
        assert np.array_equal(aligned.values[t], s_td.bits[1])


@pytest.mark.parametrize("variant", ["v1", "v2", "v3", "v4"])
def test_silent_hidden_state_gives_silent_feedback(variant, rng):
    params = ProcessingModule(rng, 4, LifConfig(), LifConfig(v_th=0.5), variant)
    signal = processing_module(SpikeTensor.from_bits(np.zeros((2, 3, 5, 4))), variant, params)
    assert signal.s_td.shape == (2, 3, 5, 4)
    assert not signal.s_td.bits.any()


def test_schedule_partitions_steps():
    schedule = SubnetSchedule.uniform(6, 3)
    assert schedule.segments == ((0, 2), (2, 4), (4, 6))
    assert schedule.alphas == default_alphas(3) == (0.125, 0.125, 0.75)
    uneven = SubnetSchedule.from_lengths([1, 3], alphas=(0.5, 0.5))
    assert uneven.lengths == [1, 3]
    assert SubnetSchedule.uniform(4, 4).fine_grained


@pytest.mark.parametrize("build, field", [
    (lambda: SubnetSchedule.uniform(4, 3), "n_sub"),
    (lambda: SubnetSchedule.uniform(4, 2, alphas=(0.5, 0.6)), "alphas"),
    (lambda: SubnetSchedule.uniform(4, 2, alphas=(1.0,)), "alphas"),
    (lambda: SubnetSchedule.uniform(4, 2, alphas=(-0.5, 1.5)), "alphas"),
    (lambda: SubnetSchedule(4, ((0, 2), (3, 4)), (0.5, 0.5)), "segments"),
])
def test_invalid_schedules(build, field):
    with pytest.raises(ConfigurationError) as err:
        build()
    assert err.value.field == field


def test_single_segment_matches_backbone():
    model = TDFormer(ModelConfig(**dict(SMALL, n_sub=1)))
    x = model.prepare(_images(0))
    chained = model.forward(x, training=True)
    _, direct = model.forward_segment(x, None, training=True)
    assert len(chained.logits) == 1
    assert np.array_equal(chained.logits[0].values, direct.values)


def test_single_segment_warns_that_feedback_is_unused(caplog):
    with caplog.at_level(logging.WARNING):
        TDFormer(ModelConfig(**dict(SMALL, n_sub=1)))
    assert "feedback" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.WARNING):
        TDFormer(ModelConfig(**SMALL))
    assert not caplog.text


def test_feedback_off_matches_backbone_without_fusion():
    cfg = ModelConfig(**SMALL)
    model, backbone = TDFormer(cfg), TDFormer(cfg)
    backbone.blocks[0].cm.variant = None
    backbone.blocks[0].cm.td_weights = {}
    x = model.prepare(_images(1, batch=100))
    fused = model.forward(x, training=True, feedback=False)
    plain = backbone.forward(x, training=True, feedback=False)
    assert fused.feedback == []
    for n, (start, stop) in enumerate(model.schedule.segments):
        _, direct = backbone.forward_segment(take(x, 0, start, stop), None, training=True)
        np.testing.assert_allclose(fused.logits[n].values, plain.logits[n].values, rtol=0, atol=1e-12)
        np.testing.assert_allclose(fused.logits[n].values, direct.values, rtol=0, atol=1e-12)


def _silence_first(n, hidden):
    return SpikeTensor.from_bits(np.zeros(hidden.shape)) if n == 0 else hidden


def test_hidden_hook_only_reaches_later_segments_through_feedback():
    model = TDFormer(ModelConfig(**SMALL))
    x = model.prepare(_images(5, batch=16))
    off = model.forward(x, training=True, feedback=False)
    off_silenced = model.forward(x, training=True, feedback=False, hidden_hook=_silence_first)
    assert not off_silenced.hidden[0].bits.any()
    assert np.array_equal(off.logits[1].values, off_silenced.logits[1].values)

    on_silenced = model.forward(x, training=True, feedback=True, hidden_hook=_silence_first)
    assert not on_silenced.feedback[0].s_td.bits.any()
    assert np.array_equal(on_silenced.logits[1].values, off.logits[1].values)


def test_feedback_changes_the_next_segment():
    model = TDFormer(ModelConfig(**SMALL))
    x = model.prepare(_images(6, batch=16))
    on = model.forward(x, training=True, feedback=True)
    off = model.forward(x, training=True, feedback=False)
    assert on.feedback[0].s_td.firing_rate > 0.0
    assert np.array_equal(on.logits[0].values, off.logits[0].values)
    assert not np.array_equal(on.logits[1].values, off.logits[1].values)


def test_pm_v1_is_mixer_then_spatial_attention(rng):
    spatial_lif = LifConfig(v_th=0.5)
    params = ProcessingModule(rng, 8, LifConfig(), spatial_lif, "v1")
    h = _spikes(rng, (2, 3, 5, 8), rate=0.5)
    signal = processing_module(h, "v1", params, training=True)
    mixed = params.mixers[0](h, training=True)
    expected = pm_spatial_attention(mixed, params.w_c, params.b, params.a, spatial_lif)
    assert np.array_equal(signal.s_td.bits, expected.bits)
    assert signal.s_td.firing_rate > 0.0


def test_spatial_weights_start_positive(rng):
    params = ProcessingModule(rng, 16, LifConfig(), LifConfig(v_th=0.5), "v1", clamp=(0.0, 1.5))
    assert np.all(params.w_c.values > 0)
    assert np.all(params.w_c.values <= 1.5 * 1.5 / 4)


def test_unreachable_feedback_threshold_warns(caplog):
    with caplog.at_level(logging.WARNING):
        TDFormer(ModelConfig(**dict(SMALL, clamp_a=1.0, pm_v_th=1.0)))
    assert "can never fire" in caplog.text


def test_later_input_does_not_change_earlier_segments():
    model = TDFormer(ModelConfig(**SMALL))
    images = _images(2)
    changed = images.copy()
    changed[:, 2:] = np.random.default_rng(3).random(changed[:, 2:].shape)
    first = model.forward(model.prepare(images), training=True)
    second = model.forward(model.prepare(changed), training=True)
    assert np.array_equal(first.logits[0].values, second.logits[0].values)
    assert np.array_equal(first.hidden[0].bits, second.hidden[0].bits)


def test_gradient_reaches_first_segment_only_through_feedback():
    target = np.array([0, 1, 0, 1])
    grads = {}
    for feedback in (True, False):
        model = TDFormer(ModelConfig(**SMALL))
        x = model.prepare(_images(4), requires_grad=True)
        result = model.forward(x, training=True, feedback=feedback)
        tdformer_loss(result.logits, target, (0.0, 1.0)).backward()
        grads[feedback] = x.grad[:2]
    assert np.any(grads[True] != 0)
    assert not np.any(grads[False])


def test_chain_rejects_mismatched_length():
    model = TDFormer(ModelConfig(**SMALL))
    with pytest.raises(ConfigurationError):
        model.forward(Node(np.zeros((3, 1, 16, 1))), training=True)

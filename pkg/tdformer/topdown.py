"""
Top-down feedback between parameter-shared sub-networks.

The T simulation steps are split into segments by a ``SubnetSchedule``.
Segment n runs the whole backbone on its slice of the input; its final
block output H_n goes through the Processing Module (channel mixer, then
clamped spatial attention) and the resulting spikes S_td reach segment
n + 1 through the Control Module, which fuses them into Q, K or V.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .attention import pm_spatial_attention
from .errors import ConfigurationError, DimensionError
from .layers import BatchNorm, SpikingProjection, fire_sequence, observe, uniform_weight
from .tensor import (Node, SpikeTensor, broadcast_to, concat, hadamard, linear,
                     maximum, take, zeros)

logger = logging.getLogger(__name__)

# which projections see the feedback spikes
CM_VARIANTS = {"CM1": ("k",), "CM2": ("v",), "CM3": ("q", "k", "v")}
PM_VARIANTS = ("v1", "v2", "v3", "v4")


def default_alphas(n):
    """Loss weights with the final stage at 0.75 and the rest sharing 0.25."""
    if n == 1:
        return (1.0,)
    return tuple([0.25 / (n - 1)] * (n - 1) + [0.75])


@dataclass(frozen=True)
class SubnetSchedule:
    total_T: int
    segments: tuple
    alphas: tuple

    def __post_init__(self):
        if self.total_T < 1:
            raise ConfigurationError("T must be >= 1", field="T")
        if not self.segments:
            raise ConfigurationError("schedule has no segments", field="n_sub")
        if len(self.alphas) != len(self.segments):
            raise ConfigurationError("{} loss weights for {} segments".format(
                len(self.alphas), len(self.segments)), field="alphas")
        expected = 0
        for start, stop in self.segments:
            if start != expected or stop <= start:
                raise ConfigurationError("segments {} do not partition [0, {})".format(
                    list(self.segments), self.total_T), field="segments")
            expected = stop
        if expected != self.total_T:
            raise ConfigurationError("segments end at {}, T is {}".format(expected, self.total_T),
                                     field="segments")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigurationError("every weight must lie in [0, 1], got {}".format(list(self.alphas)),
                                     field="alphas")
        if abs(sum(self.alphas) - 1.0) > 1e-9:
            raise ConfigurationError("weights must sum to 1, got {}".format(sum(self.alphas)),
                                     field="alphas")

    @classmethod
    def uniform(cls, total_T, n, alphas=None):
        if not 1 <= n <= total_T or total_T % n:
            raise ConfigurationError("n_sub={} must divide T={}".format(n, total_T), field="n_sub")
        length = total_T // n
        segments = tuple((i * length, (i + 1) * length) for i in range(n))
        return cls(total_T, segments, tuple(alphas) if alphas is not None else default_alphas(n))

    @classmethod
    def from_lengths(cls, lengths, alphas=None):
        bounds = np.cumsum([0] + list(lengths))
        segments = tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
        alphas = tuple(alphas) if alphas is not None else default_alphas(len(segments))
        return cls(int(bounds[-1]), segments, alphas)

    @property
    def n(self):
        return len(self.segments)

    @property
    def lengths(self):
        return [stop - start for start, stop in self.segments]

    @property
    def fine_grained(self):
        return self.n == self.total_T


@dataclass
class FeedbackSignal:
    s_td: SpikeTensor
    origin_segment: int


@dataclass
class ChainResult:
    logits: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    feedback: list = field(default_factory=list)


def align_feedback(signal, steps):
    """Step-wise when lengths match, otherwise the producer's last step repeated."""
    node = signal.s_td.node
    if node.shape[0] == steps:
        return node
    last = take(node, 0, node.shape[0] - 1, node.shape[0])
    return broadcast_to(last, (steps,) + node.shape[1:])


class ControlModule:
    """Q/K/V projections of one block plus feedback weights for the fused ones."""

    def __init__(self, rng, channels, lif, variant=None, use_value=True, prefix=""):
        if variant is not None and variant not in CM_VARIANTS:
            raise ConfigurationError("unknown control module '{}'".format(variant), field="cm")
        keys = ("q", "k", "v") if use_value else ("q", "k")
        fused = CM_VARIANTS.get(variant, ())
        if any(key not in keys for key in fused):
            raise ConfigurationError("{} fuses feedback into a projection the attention does not use".format(
                variant), field="cm")
        self.variant = variant
        self.prefix = prefix
        self.projections = {key: SpikingProjection(rng, channels, channels, lif, prefix + key)
                            for key in keys}
        self.td_weights = {key: uniform_weight(rng, channels, channels) for key in fused}

    def __getitem__(self, key):
        return self.projections[key]

    def __contains__(self, key):
        return key in self.projections

    def named_parameters(self, prefix=""):
        for key, projection in self.projections.items():
            yield from projection.named_parameters("{}{}.".format(prefix, key))
        for key, weight in self.td_weights.items():
            yield "{}td_{}".format(prefix, key), weight

    def named_states(self, prefix=""):
        for key, projection in self.projections.items():
            yield from projection.named_states("{}{}.".format(prefix, key))


def control_module(s_bu, s_td, variant, weights, training=True, bank=None):
    """Q, K, V of a block, with feedback fused by concatenation into the variant's projections.

    Without ``s_td`` the fused projections see zeros in the feedback slot,
    which gives exactly the no-feedback computation.
    """
    if variant != weights.variant:
        raise ConfigurationError("weights were built for {}, not {}".format(weights.variant, variant),
                                 field="cm")
    fused = CM_VARIANTS.get(variant, ())
    td = None
    if fused:
        if s_td is None:
            td = zeros(s_bu.shape)
        else:
            if isinstance(s_td, FeedbackSignal):
                td = align_feedback(s_td, s_bu.shape[0])
            else:
                td = s_td.node
            if td.shape != s_bu.shape:
                raise DimensionError("feedback {} does not match bottom-up spikes {}".format(
                    td.shape, s_bu.shape))

    outputs = []
    for key in ("q", "k", "v"):
        if key not in weights:
            outputs.append(None)
        elif key in fused:
            projection = weights[key]
            observe(projection.name, s_bu.bits, projection.linear.c_out)
            if s_td is not None:
                observe("{}td.{}".format(weights.prefix, key), td.values, projection.linear.c_out)
            mixed = linear(concat(s_bu.node, td, axis=-1),
                           concat(projection.linear.weight, weights.td_weights[key], axis=0))
            outputs.append(fire_sequence(projection.bn(mixed, training), projection.lif, bank, projection.name))
        else:
            outputs.append(weights[key](s_bu, training, bank))
    return tuple(outputs)


class ProcessingModule:

    def __init__(self, rng, channels, lif, spatial_lif, variant="v1", clamp=(0.0, 1.5), prefix="pm."):
        if variant not in PM_VARIANTS:
            raise ConfigurationError("unknown processing module '{}'".format(variant), field="pm")
        self.variant = variant
        self.prefix = prefix
        self.lif = lif
        self.spatial_lif = spatial_lif
        self.b, self.a = clamp
        self.mixers = []
        self.depthwise = None
        self.bn = None
        if variant == "v3":
            self.depthwise = Node(rng.uniform(0.5, 1.5, size=channels), requires_grad=True)
            self.bn = BatchNorm(channels, gain=lif.firing_current)
        else:
            depth = 2 if variant == "v2" else 1
            self.mixers = [SpikingProjection(rng, channels, channels, lif, "{}mix{}".format(prefix, i))
                           for i in range(depth)]
        # positive start: the map begins as a spike-count saliency reaching a at rate 1/sqrt(C)
        self.w_c = Node(rng.uniform(0.5, 1.5, size=channels) * self.a / np.sqrt(channels), requires_grad=True)

    def named_parameters(self, prefix=""):
        for i, mixer in enumerate(self.mixers):
            yield from mixer.named_parameters("{}mix{}.".format(prefix, i))
        if self.depthwise is not None:
            yield prefix + "depthwise", self.depthwise
            yield from self.bn.named_parameters(prefix + "bn.")
        yield prefix + "w_c", self.w_c

    def named_states(self, prefix=""):
        for i, mixer in enumerate(self.mixers):
            yield from mixer.named_states("{}mix{}.".format(prefix, i))
        if self.bn is not None:
            yield from self.bn.named_states(prefix + "bn.")


def processing_module(h, variant, params, training=True, bank=None, origin_segment=0):
    if variant != params.variant:
        raise ConfigurationError("parameters were built for {}, not {}".format(params.variant, variant),
                                 field="pm")
    x = h
    if variant == "v3":
        observe(params.prefix + "scale", h.bits, 1)
        pre = params.bn(hadamard(h.node, params.depthwise), training)
        x = fire_sequence(pre, params.lif, bank, params.prefix + "scale")
    else:
        for mixer in params.mixers:
            x = mixer(x, training, bank)
    if variant == "v4":
        x = SpikeTensor(maximum(x.node, h.node))
    out = pm_spatial_attention(x, params.w_c, params.b, params.a, params.spatial_lif, bank,
                               params.prefix + "spatial")
    return FeedbackSignal(out, origin_segment)


def run_subnet_chain(x, schedule, model, cm=None, pm=None, feedback=True, training=False,
                     persist_membrane=False, hidden_hook=None):
    """Run every segment in order and return per-segment logits [T_seg, B, L].

    ``model`` provides ``forward_segment(x, s_td, training, bank)`` returning
    (H_n, O_n) and the processing module parameters as ``model.pm``.
    ``hidden_hook(n, H_n)`` may replace a segment's output before the
    feedback path sees it.
    """
    if x.shape[0] != schedule.total_T:
        raise ConfigurationError("schedule covers {} steps, input has {}".format(
            schedule.total_T, x.shape[0]), field="T")
    if cm is not None and cm != model.cm_variant:
        raise ConfigurationError("model was built with {}, not {}".format(model.cm_variant, cm), field="cm")
    if pm is not None and pm != model.pm_variant:
        raise ConfigurationError("model was built with {}, not {}".format(model.pm_variant, pm), field="pm")

    bank = {} if persist_membrane else None
    signal = None
    result = ChainResult()
    for n, (start, stop) in enumerate(schedule.segments):
        hidden, logits = model.forward_segment(take(x, 0, start, stop), signal, training, bank)
        if hidden_hook is not None:
            hidden = hidden_hook(n, hidden)
        result.logits.append(logits)
        result.hidden.append(hidden)
        if feedback and n < schedule.n - 1:
            signal = processing_module(hidden, model.pm_variant, model.pm, training, bank, n)
            result.feedback.append(signal)
    return result

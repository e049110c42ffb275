"""
Parameterised building blocks (Linear, BatchNorm, Linear -> BN -> LIF) and
the activity recorder that counts spikes and operations per block.
"""
import logging
from contextlib import contextmanager

import numpy as np

from .neuron import run_sequence
from .tensor import BatchNormState, Node, SpikeTensor, add, batch_norm, linear, scale

logger = logging.getLogger(__name__)

_recorders = []


class ActivityRecorder:
    """Per-block totals collected while a forward pass runs.

    ``spikes``/``elements`` give the measured firing rate of the block input,
    ``accumulates`` counts the spike-gated additions actually performed and
    ``macs`` the dense multiply-accumulate count for the same calls.
    """

    def __init__(self):
        self.blocks = {}

    def _entry(self, name):
        return self.blocks.setdefault(name, {"spikes": 0.0, "elements": 0, "accumulates": 0.0,
                                             "macs": 0, "calls": 0})

    def observe(self, name, values, fan_out):
        entry = self._entry(name)
        ones = float(np.count_nonzero(values))
        entry["spikes"] += ones
        entry["elements"] += int(values.size)
        entry["accumulates"] += ones * fan_out
        entry["macs"] += int(values.size) * fan_out
        entry["calls"] += 1

    def firing_rates(self):
        return {name: entry["spikes"] / entry["elements"]
                for name, entry in self.blocks.items() if entry["elements"]}


@contextmanager
def record_activity():
    recorder = ActivityRecorder()
    _recorders.append(recorder)
    try:
        yield recorder
    finally:
        _recorders.remove(recorder)


def observe(name, values, fan_out):
    for recorder in _recorders:
        recorder.observe(name, values, fan_out)


def uniform_weight(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return Node(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def fire_sequence(pre, lif, bank=None, key=None):
    """Run LIF over time; with a ``bank`` the final membrane state is kept under ``key``."""
    if bank is None:
        return run_sequence(pre, lif)
    spikes, state = run_sequence(pre, lif, bank.get(key), return_state=True)
    bank[key] = state
    return spikes


def membrane_shortcut(branch, spikes, lif, bank=None, key=None):
    """Fire ``branch`` plus the shortcut spikes scaled to the firing current.

    A zero branch passes binary spikes through unchanged from a resting membrane.
    """
    if isinstance(spikes, SpikeTensor):
        spikes = spikes.node
    return fire_sequence(add(branch, scale(spikes, lif.firing_current)), lif, bank, key)


class Linear:

    def __init__(self, rng, c_in, c_out, bias=True):
        self.weight = uniform_weight(rng, c_in, c_out)
        self.bias = Node(np.zeros(c_out), requires_grad=True) if bias else None

    @property
    def c_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias


class BatchNorm:

    def __init__(self, channels, eps=1e-5, momentum=0.1, gain=1.0):
        self.gamma = Node(np.full(channels, float(gain)), requires_grad=True)
        self.beta = Node(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState(channels, eps, momentum)

    def __call__(self, x, training):
        return batch_norm(x, self.gamma, self.beta, self.state, channel_axis=-1, training=training)

    def named_parameters(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_states(self, prefix=""):
        yield prefix.rstrip("."), self.state


class SpikingProjection:
    """Linear -> BN -> LIF over a time-major [T, B, N, C] input."""

    def __init__(self, rng, c_in, c_out, lif, name, bias=False):
        self.name = name
        self.linear = Linear(rng, c_in, c_out, bias=bias)
        self.bn = BatchNorm(c_out, gain=lif.firing_current)
        self.lif = lif

    def pre(self, x, training):
        if isinstance(x, SpikeTensor):
            x = x.node
        observe(self.name, x.values, self.linear.c_out)
        return self.bn(self.linear(x), training)

    def __call__(self, x, training, bank=None):
        return fire_sequence(self.pre(x, training), self.lif, bank, self.name)

    def named_parameters(self, prefix=""):
        yield from self.linear.named_parameters(prefix + "linear.")
        yield from self.bn.named_parameters(prefix + "bn.")

    def named_states(self, prefix=""):
        yield from self.bn.named_states(prefix + "bn.")

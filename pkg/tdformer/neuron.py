"""
Leaky integrate-and-fire dynamics with a rectangular surrogate gradient.

One step is split into three graph operations so that analysis code can
inspect each of them:

    charge:  H = V + (X - (V - V_reset)) / tau
    fire:    S = 1 if H >= v_th else 0      (surrogate 1/v_th on (v_th/2, 3 v_th/2))
    reset:   V = H (1 - S) + V_reset S      (hard, the model neuron)
             V = H - v_th S                 (soft, used by the sensitivity analysis)
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError
from .tensor import Node, SpikeTensor, _result, index, stack

logger = logging.getLogger(__name__)

RESET_MODES = ("hard", "soft")


@dataclass(frozen=True)
class LifConfig:
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    reset: str = "hard"
    detach_reset: bool = False

    def __post_init__(self):
        if not self.tau > 1:
            raise ConfigurationError("tau must be > 1, got {}".format(self.tau), field="tau")
        if not self.v_th > 0:
            raise ConfigurationError("v_th must be > 0, got {}".format(self.v_th), field="v_th")
        if not self.v_reset < self.v_th:
            raise ConfigurationError("v_reset {} must be below v_th {}".format(self.v_reset, self.v_th),
                                     field="v_reset")
        if self.reset not in RESET_MODES:
            raise ConfigurationError("reset must be one of {}".format(RESET_MODES), field="reset")

    @property
    def decay(self):
        return 1.0 - 1.0 / self.tau

    @property
    def surrogate_window(self):
        return 0.5 * self.v_th, 1.5 * self.v_th

    @property
    def firing_current(self):
        """Smallest constant input that fires a resting neuron on its first step."""
        return self.tau * (self.v_th - self.v_reset)

    def with_threshold(self, v_th):
        return replace(self, v_th=v_th)


@dataclass
class NeuronState:
    v: Node
    h_trace: list = field(default=None)

    @classmethod
    def initial(cls, shape, cfg, record=False):
        return cls(Node(np.full(shape, cfg.v_reset), op_tag="v_init"), [] if record else None)


def surrogate_grad(h, cfg):
    low, high = cfg.surrogate_window
    return 1.0 / cfg.v_th if low < h < high else 0.0


def surrogate_window_grad(h, cfg):
    low, high = cfg.surrogate_window
    return ((h > low) & (h < high)) * (1.0 / cfg.v_th)


def charge(v, x, cfg):
    leak = 1.0 / cfg.tau
    decay = 1.0 - 1.0 / cfg.tau
    values = v.values + leak * (x.values - (v.values - cfg.v_reset))

    def backward(g):
        return g * decay, g * leak
    return _result(values, (v, x), "lif_charge", backward)


def fire(h, cfg):
    values = (h.values >= cfg.v_th).astype(h.values.dtype)

    def backward(g):
        return (g * surrogate_window_grad(h.values, cfg),)
    return _result(values, (h,), "lif_fire", backward)


def reset(h, s, cfg):
    if cfg.reset == "hard":
        values = h.values * (1.0 - s.values) + cfg.v_reset * s.values

        def backward(g):
            g_s = None if cfg.detach_reset else g * (cfg.v_reset - h.values)
            return g * (1.0 - s.values), g_s
    else:
        values = h.values - cfg.v_th * s.values

        def backward(g):
            return g, None if cfg.detach_reset else -cfg.v_th * g
    return _result(values, (h, s), "lif_reset", backward)


def lif_step(state, x, cfg):
    if state.v.shape != x.shape:
        raise DimensionError("membrane {} does not match input {}".format(state.v.shape, x.shape))
    if not np.all(np.isfinite(x.values)):
        raise NumericError("non-finite input current to LIF ({})".format(x.op_tag))
    h = charge(state.v, x, cfg)
    s = fire(h, cfg)
    v = reset(h, s, cfg)
    trace = None if state.h_trace is None else state.h_trace + [h]
    return SpikeTensor(s), NeuronState(v, trace)


def run_sequence(inputs, cfg, initial_state=None, return_state=False):
    """Fold ``lif_step`` over the leading time axis of ``inputs``."""
    if inputs.ndim < 1:
        raise DimensionError("run_sequence needs a leading time axis")
    state = initial_state or NeuronState.initial(inputs.shape[1:], cfg)
    spikes = []
    for t in range(inputs.shape[0]):
        s, state = lif_step(state, index(inputs, 0, t), cfg)
        spikes.append(s.node)
    out = SpikeTensor(stack(spikes, axis=0))
    if return_state:
        return out, state
    return out

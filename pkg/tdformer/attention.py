"""
Spike-based self-attention over time-major SpikeTensors.

    ssa          SN(Q K^T V * s)
    sdsa1        Q * SN(SUM_tokens(K * V))
    sdsa2        SN_{s v_th}((Q K^T) V)
    qkta / qkca  SN(SUM(Q)) * K, summed over channels (token) or tokens (channel)
    pm_spatial   SN(X * clamp(X w_c, b, a)), the feedback path's spatial mixer

Every mechanism reports its operation count to any active activity recorder
under the ``name`` it is called with.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .errors import ConfigurationError, DimensionError
from .layers import fire_sequence, observe
from .neuron import LifConfig
from .tensor import (SpikeTensor, clamp, hadamard, linear, matmul, reduce_sum,
                     reshape, scale, swap_last, transpose)

logger = logging.getLogger(__name__)

ATTENTION_KINDS = ("ssa", "sdsa1", "sdsa2", "qkta", "qkca", "pm_spatial")
SCALED_KINDS = ("ssa", "sdsa2")
QK_MODES = {"qkta": "token", "qkca": "channel"}

# attention LIFs of the spiking-transformer backbones fire at half threshold
ATTENTION_LIF = LifConfig(tau=2.0, v_th=0.5)


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "ssa"
    scale: Optional[float] = None
    heads: int = 1
    lif: LifConfig = field(default=ATTENTION_LIF)
    clamp: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ConfigurationError("unknown attention kind '{}'".format(self.kind), field="attention")
        if self.kind in SCALED_KINDS:
            if self.scale is None or not self.scale > 0:
                raise ConfigurationError("{} needs a scale > 0".format(self.kind), field="scale")
        elif self.scale is not None:
            raise ConfigurationError("{} takes no scale".format(self.kind), field="scale")
        if self.heads < 1:
            raise ConfigurationError("heads must be >= 1", field="heads")
        if (self.kind == "pm_spatial") != (self.clamp is not None):
            raise ConfigurationError("clamp bounds are required for pm_spatial only", field="clamp")
        if self.clamp is not None and not self.clamp[0] < self.clamp[1]:
            raise ConfigurationError("clamp needs b < a, got {}".format(self.clamp), field="clamp")

    @property
    def uses_value(self):
        return self.kind in ("ssa", "sdsa1", "sdsa2")

    @property
    def firing_lif(self):
        """The LIF that turns the attention product into spikes."""
        if self.kind == "sdsa2":
            return self.lif.with_threshold(self.scale * self.lif.v_th)
        return self.lif

    def check_channels(self, channels):
        if channels % self.heads:
            raise ConfigurationError("{} heads do not divide {} channels".format(self.heads, channels),
                                     field="heads")


def _same_shape(op, *spikes):
    shapes = [s.shape for s in spikes]
    if len(set(shapes)) != 1:
        raise DimensionError("{}: operand shapes differ {}".format(op, shapes))


def make_qkv(s_bu, weights, training=True, bank=None):
    """Linear -> BN -> LIF for every projection in ``weights`` (keys q, k, v)."""
    return tuple(weights[key](s_bu, training, bank) if key in weights else None
                 for key in ("q", "k", "v"))


def split_heads(node, heads):
    t, b, n, c = node.shape
    return transpose(reshape(node, (t, b, n, heads, c // heads)), (0, 1, 3, 2, 4))


def merge_heads(node):
    t, b, h, n, d = node.shape
    return reshape(transpose(node, (0, 1, 3, 2, 4)), (t, b, n, h * d))


def ssa(q, k, v, s, lif=ATTENTION_LIF, bank=None, name="ssa", norm=None):
    """``norm``, when given, maps the scaled product before the LIF."""
    _same_shape("ssa", q, k, v)
    observe(name, q.bits, 2 * q.shape[-2])
    pre = scale(matmul(matmul(q.node, swap_last(k.node)), v.node), s)
    if norm is not None:
        pre = norm(pre)
    return fire_sequence(pre, lif, bank, name)


def sdsa1(q, k, v, lif=ATTENTION_LIF, bank=None, name="sdsa1"):
    _same_shape("sdsa1", q, k, v)
    observe(name, k.bits, 2)
    columns = reduce_sum(hadamard(k.node, v.node), axis=-2, keepdims=True)
    gate = fire_sequence(columns, lif, bank, name)
    return SpikeTensor(hadamard(q.node, gate.node))


def sdsa2(q, k, v, s, lif=ATTENTION_LIF, bank=None, name="sdsa2", norm=None):
    _same_shape("sdsa2", q, k, v)
    observe(name, q.bits, 2 * q.shape[-2])
    pre = matmul(matmul(q.node, swap_last(k.node)), v.node)
    if norm is not None:
        pre = norm(pre)
    return fire_sequence(pre, lif.with_threshold(s * lif.v_th), bank, name)


def qk_attention(q, k, mode, lif=ATTENTION_LIF, bank=None, name="qk"):
    if mode not in ("token", "channel"):
        raise ConfigurationError("mode must be token or channel, got '{}'".format(mode), field="mode")
    _same_shape("qk_attention", q, k)
    observe(name, q.bits, 2)
    axis = -1 if mode == "token" else -2
    gate = fire_sequence(reduce_sum(q.node, axis=axis, keepdims=True), lif, bank, name)
    return SpikeTensor(hadamard(gate.node, k.node))


def spatial_map(x, w_c, b, a):
    """Channel-weighted spike sum per position, clamped to [b, a]: shape [..., N, 1]."""
    if not b < a:
        raise ConfigurationError("clamp needs b < a, got b={} a={}".format(b, a), field="clamp")
    channels = x.shape[-1]
    if w_c.shape != (channels,):
        raise DimensionError("spatial weights {} do not match {} channels".format(w_c.shape, channels))
    return clamp(linear(x.node, reshape(w_c, (channels, 1))), b, a)


def pm_spatial_attention(x, w_c, b, a, lif, bank=None, name="pm.spatial"):
    m = spatial_map(x, w_c, b, a)
    observe(name, x.bits, 2)
    return fire_sequence(hadamard(x.node, m), lif, bank, name)


def _per_head(norm, heads):
    def apply(node):
        return split_heads(norm(merge_heads(node)), heads)
    return apply


def attend(q, k, v, cfg, bank=None, name="attn", norm=None):
    """Dispatch on ``cfg.kind`` with heads split along the channel axis.

    ``norm`` maps a merged [T, B, N, C] product before the LIF of the scaled kinds.
    """
    if cfg.kind == "pm_spatial":
        raise ConfigurationError("pm_spatial runs inside the processing module", field="attention")
    if cfg.uses_value and v is None:
        raise ConfigurationError("{} needs a value projection".format(cfg.kind), field="attention")
    if cfg.heads > 1:
        cfg.check_channels(q.shape[-1])
        q, k = (SpikeTensor(split_heads(s.node, cfg.heads)) for s in (q, k))
        if v is not None:
            v = SpikeTensor(split_heads(v.node, cfg.heads))
        if norm is not None:
            norm = _per_head(norm, cfg.heads)

    if cfg.kind == "ssa":
        out = ssa(q, k, v, cfg.scale, cfg.lif, bank, name, norm)
    elif cfg.kind == "sdsa1":
        out = sdsa1(q, k, v, cfg.lif, bank, name)
    elif cfg.kind == "sdsa2":
        out = sdsa2(q, k, v, cfg.scale, cfg.lif, bank, name, norm)
    else:
        out = qk_attention(q, k, QK_MODES[cfg.kind], cfg.lif, bank, name)

    if cfg.heads > 1:
        out = SpikeTensor(merge_heads(out.node))
    return out

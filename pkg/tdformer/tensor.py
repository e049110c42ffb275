"""
Dense reverse-mode automatic differentiation over numpy arrays.

Every intermediate of a forward pass is a ``Node``: the value, a lazily
allocated gradient slot, the tag of the operation that produced it and the
parent nodes it was computed from. ``Node.backward`` walks the graph in
reverse topological order and accumulates gradients into every node that
requires them.

Operations are plain functions (``matmul``, ``hadamard``, ``batch_norm``...)
that return new nodes; each one closes over what its backward pass needs.
"""
import logging
from contextlib import contextmanager

import numpy as np

from .errors import (ConfigurationError, DimensionError, NumericError,
                     UninitializedStatisticsError)

logger = logging.getLogger(__name__)

MAX_RANK = 5
PRECISIONS = {32: np.float32, 64: np.float64}

_settings = {"dtype": np.float64, "grad_enabled": True}


def set_precision(bits):
    if bits not in PRECISIONS:
        raise ConfigurationError("expected 32 or 64, got {}".format(bits), field="precision")
    _settings["dtype"] = PRECISIONS[bits]


def get_precision():
    return 32 if _settings["dtype"] is np.float32 else 64


def get_dtype():
    return _settings["dtype"]


@contextmanager
def no_grad():
    """Build nodes without parents or backward closures (evaluation passes)."""
    previous = _settings["grad_enabled"]
    _settings["grad_enabled"] = False
    try:
        yield
    finally:
        _settings["grad_enabled"] = previous


def check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) > MAX_RANK:
        raise DimensionError("rank {} exceeds {} for shape {}".format(len(shape), MAX_RANK, shape))
    if any(d < 1 for d in shape):
        raise DimensionError("every extent must be >= 1, got shape {}".format(shape))
    return shape


class Node:

    def __init__(self, values, parents=(), op_tag="leaf", requires_grad=False, backward_fn=None):
        self.values = np.asarray(values, dtype=get_dtype())
        self.shape = check_shape(self.values.shape)
        self.parents = tuple(parents)
        self.op_tag = op_tag
        self.requires_grad = requires_grad
        self.backward_fn = backward_fn
        self._grad = None

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=self.values.dtype)

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.values.size != 1:
            raise DimensionError("item() needs a single element, got shape {}".format(self.shape))
        return float(self.values.reshape(()))

    def backward(self, grad=None):
        """Accumulate d(self)/d(node) into the ``grad`` of every reachable node.

        Gradients add up across calls; call ``zero_grad`` on the leaves to
        start over.
        """
        if grad is None:
            if self.values.size != 1:
                raise DimensionError(
                    "backward() without a seed needs a scalar, got shape {}".format(self.shape))
            grad = np.ones_like(self.values)
        else:
            grad = np.asarray(grad, dtype=self.values.dtype)
            if grad.shape != self.shape:
                raise DimensionError("seed gradient {} does not match node {}".format(grad.shape, self.shape))

        pending = {id(self): grad}
        for node in reversed(topological_order(self)):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            node._grad = upstream.copy() if node._grad is None else node._grad + upstream
            if node.backward_fn is None:
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    def __repr__(self):
        return "Node(op={}, shape={}, requires_grad={})".format(self.op_tag, self.shape, self.requires_grad)


def topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class SpikeTensor:
    """Binary activations; ``node`` is the graph node that emitted them."""

    def __init__(self, node):
        bits = node.values
        if not np.all((bits == 0) | (bits == 1)):
            raise NumericError("spikes emitted by '{}' are not binary".format(node.op_tag))
        self.node = node

    @classmethod
    def from_bits(cls, bits):
        return cls(Node(bits, op_tag="spikes"))

    @property
    def bits(self):
        return self.node.values

    @property
    def shape(self):
        return self.node.shape

    @property
    def firing_rate(self):
        return float(self.node.values.mean())

    def __repr__(self):
        return "SpikeTensor(shape={}, rate={:.4f})".format(self.shape, self.firing_rate)


def tensor(values, requires_grad=False):
    return Node(values, requires_grad=requires_grad)


def zeros(shape):
    return Node(np.zeros(shape))


def _result(values, parents, op_tag, backward_fn):
    if _settings["grad_enabled"] and any(p.requires_grad for p in parents):
        return Node(values, parents, op_tag, True, backward_fn)
    return Node(values, op_tag=op_tag)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op, first, second):
    try:
        return np.broadcast_shapes(first, second)
    except ValueError:
        raise DimensionError("{}: cannot broadcast {} with {}".format(op, first, second))


def _axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise DimensionError("axis {} out of range for rank {}".format(axis, ndim))
    return axis % ndim


def add(a, b):
    _broadcast("add", a.shape, b.shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _result(a.values + b.values, (a, b), "add", backward)


def sub(a, b):
    _broadcast("sub", a.shape, b.shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _result(a.values - b.values, (a, b), "sub", backward)


def hadamard(a, b):
    _broadcast("hadamard", a.shape, b.shape)

    def backward(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)
    return _result(a.values * b.values, (a, b), "hadamard", backward)


def scale(a, factor):
    def backward(g):
        return (g * factor,)
    return _result(a.values * factor, (a,), "scale", backward)


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    _broadcast("maximum", a.shape, b.shape)
    first = a.values >= b.values

    def backward(g):
        return unbroadcast(g * first, a.shape), unbroadcast(g * ~first, b.shape)
    return _result(np.maximum(a.values, b.values), (a, b), "maximum", backward)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs rank >= 2 operands, got {} and {}".format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: inner extents differ for {} and {}".format(a.shape, b.shape))
    _broadcast("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        return (unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape),
                unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape))
    return _result(np.matmul(a.values, b.values), (a, b), "matmul", backward)


def reduce_sum(a, axis, keepdims=False):
    axis = _axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _result(a.values.sum(axis=axis, keepdims=keepdims), (a,), "reduce_sum", backward)


def reduce_mean(a, axis, keepdims=False):
    axis = _axis(axis, a.ndim)
    count = a.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)
    return _result(a.values.mean(axis=axis, keepdims=keepdims), (a,), "reduce_mean", backward)


def clamp(a, lo, hi, straight_through=False):
    """Clip into [lo, hi]; the default gradient is 1 strictly inside, 0 elsewhere."""
    if not lo < hi:
        raise ConfigurationError("clamp needs lo < hi, got lo={} hi={}".format(lo, hi), field="clamp")
    if straight_through:
        mask = np.ones_like(a.values)
    else:
        mask = ((a.values > lo) & (a.values < hi)).astype(a.values.dtype)

    def backward(g):
        return (g * mask,)
    return _result(np.clip(a.values, lo, hi), (a,), "clamp", backward)


def concat(a, b, axis=-1):
    if a.ndim != b.ndim:
        raise DimensionError("concat: rank differs for {} and {}".format(a.shape, b.shape))
    axis = _axis(axis, a.ndim)
    for i, (x, y) in enumerate(zip(a.shape, b.shape)):
        if i != axis and x != y:
            raise DimensionError("concat along {}: {} and {} differ on axis {}".format(axis, a.shape, b.shape, i))
    split = a.shape[axis]

    def backward(g):
        first, second = np.split(g, [split], axis=axis)
        return first, second
    return _result(np.concatenate([a.values, b.values], axis=axis), (a, b), "concat", backward)


def stack(nodes, axis=0):
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise DimensionError("stack needs equal shapes, got {}".format(sorted(shapes)))
    values = np.stack([n.values for n in nodes], axis=axis)
    axis = _axis(axis, values.ndim)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))
    return _result(values, tuple(nodes), "stack", backward)


def index(a, axis, position):
    """Select one position along ``axis`` and drop that axis."""
    axis = _axis(axis, a.ndim)

    def backward(g):
        full = np.zeros_like(a.values)
        selector = [slice(None)] * a.ndim
        selector[axis] = position
        full[tuple(selector)] = g
        return (full,)
    return _result(np.take(a.values, position, axis=axis), (a,), "index", backward)


def take(a, axis, start, stop):
    """Contiguous slice ``start:stop`` along ``axis`` (the axis is kept)."""
    axis = _axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError("slice {}:{} invalid for extent {}".format(start, stop, a.shape[axis]))
    selector = [slice(None)] * a.ndim
    selector[axis] = slice(start, stop)
    selector = tuple(selector)

    def backward(g):
        full = np.zeros_like(a.values)
        full[selector] = g
        return (full,)
    return _result(a.values[selector], (a,), "take", backward)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("cannot reshape {} into {}".format(a.shape, shape))

    def backward(g):
        return (g.reshape(a.shape),)
    return _result(a.values.reshape(shape), (a,), "reshape", backward)


def transpose(a, axes):
    axes = tuple(_axis(ax, a.ndim) for ax in axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(a.values, axes), (a,), "transpose", backward)


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a, shape):
    shape = tuple(shape)
    if _broadcast("broadcast_to", a.shape, shape) != shape:
        raise DimensionError("cannot broadcast {} to {}".format(a.shape, shape))

    def backward(g):
        return (unbroadcast(g, a.shape),)
    return _result(np.broadcast_to(a.values, shape).copy(), (a,), "broadcast_to", backward)


def linear(x, weight, bias=None):
    """Affine map over the trailing axis: ``x @ weight + bias``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError("linear: input {} does not match weight {}".format(x.shape, weight.shape))
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError("linear: bias {} does not match weight {}".format(bias.shape, weight.shape))
    c_in, c_out = weight.shape
    values = np.matmul(x.values, weight.values)
    if bias is not None:
        values = values + bias.values

    def backward(g):
        flat_x = x.values.reshape(-1, c_in)
        flat_g = g.reshape(-1, c_out)
        grads = (np.matmul(g, weight.values.T), np.matmul(flat_x.T, flat_g))
        if bias is not None:
            grads += (flat_g.sum(axis=0),)
        return grads
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(values, parents, "linear", backward)


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())
        self.eps = eps
        self.momentum = momentum
        self.num_batches = 0

    @property
    def channels(self):
        return self.running_mean.shape[0]

    @property
    def initialized(self):
        return self.num_batches > 0

    def update(self, mean, unbiased_var):
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean
        self.running_var = (1 - m) * self.running_var + m * unbiased_var
        self.num_batches += 1


def batch_norm(x, gamma, beta, state, channel_axis=-1, training=True):
    axis = _axis(channel_axis, x.ndim)
    channels = x.shape[axis]
    if gamma.shape != (channels,) or beta.shape != (channels,) or state.channels != channels:
        raise DimensionError("batch_norm: {} channels on axis {} of {}, parameters {} / {}".format(
            channels, axis, x.shape, gamma.shape, beta.shape))
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    shape = [1] * x.ndim
    shape[axis] = channels

    if training:
        mean = x.values.mean(axis=reduce_axes)
        var = x.values.var(axis=reduce_axes)
        count = x.size // channels
        state.update(mean, var * count / (count - 1) if count > 1 else var)
    else:
        if not state.initialized:
            raise UninitializedStatisticsError("batch norm evaluated before any training step")
        mean, var = state.running_mean, state.running_var

    inv_std = (1.0 / np.sqrt(var + state.eps)).reshape(shape)
    x_hat = (x.values - mean.reshape(shape)) * inv_std
    values = gamma.values.reshape(shape) * x_hat + beta.values.reshape(shape)

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        gain = gamma.values.reshape(shape) * inv_std
        if training:
            g_x = gain * (g - g.mean(axis=reduce_axes, keepdims=True)
                          - x_hat * (g * x_hat).mean(axis=reduce_axes, keepdims=True))
        else:
            g_x = gain * g
        return g_x, g_gamma, g_beta
    return _result(values, (x, gamma, beta), "batch_norm", backward)


def cross_entropy(logits, targets):
    """Mean cross-entropy of ``logits`` [B, L] against class indices [B]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy: logits {} with targets {}".format(logits.shape, targets.shape))
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise DimensionError("cross_entropy: targets outside [0, {})".format(logits.shape[1]))
    rows = np.arange(logits.shape[0])
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        return (g * probs / logits.shape[0],)
    return _result(-log_probs[rows, targets].mean(), (logits,), "cross_entropy", backward)

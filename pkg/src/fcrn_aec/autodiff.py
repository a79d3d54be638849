"""A small reverse-mode automatic differentiation engine.

Only the layers the FCRN needs are provided. Tensors carry feature maps laid
out as ``(..., M, C)``: any number of leading axes (batch, time), then the
feature (frequency) axis, then channels. All convolution and pooling work on
the feature axis only, so leading axes are treated as independent frames.
"""

from collections import OrderedDict

import numpy as np


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "consumed")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.consumed = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float)
        else:
            self.grad += g


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(value, requires_grad=True)
        self.name = name


def constant(value):
    return value if isinstance(value, Tensor) else Tensor(value)


_grad_enabled = True


class no_grad:
    """Context manager that skips graph recording (inference only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _node(value, parents, backward_fn):
    parents = tuple(parents)
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, backward_fn)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")

    def back(g):
        return g, g
    return _node(a.value + b.value, (a, b), back)


def mul(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")

    def back(g):
        return g * b.value, g * a.value
    return _node(a.value * b.value, (a, b), back)


def leaky_relu(x, alpha=0.01):
    neg = x.value < 0

    def back(g):
        gx = g.copy()
        gx[neg] *= alpha
        return (gx,)
    out = x.value.copy()
    out[neg] *= alpha
    return _node(out, (x,), back)


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def back(g):
        return (g * out * (1.0 - out),)
    return _node(out, (x,), back)


def tanh(x):
    out = np.tanh(x.value)

    def back(g):
        return (g * (1.0 - out * out),)
    return _node(out, (x,), back)


# -- feature-axis layers -----------------------------------------------------

def _same_padding(N):
    left = (N - 1) // 2
    return left, N - 1 - left


def _im2col(x3, N, before, after):
    """(L, M, C) -> (L, M, N*C) with column block j holding rows m+j of the padded input."""
    L, M, C = x3.shape
    xp = np.zeros((L, M + N - 1, C))
    xp[:, before:before + M] = x3
    cols = np.empty((L, M, N * C))
    for j in range(N):
        cols[:, :, j * C:(j + 1) * C] = xp[:, j:j + M]
    return cols


def conv_freq(x, kernel, bias):
    """Convolution along the feature axis with zero "same" padding, stride 1.

    ``kernel`` has shape (N, Cin, Cout), ``bias`` shape (Cout,). For even N the
    extra padding row goes to the high-index side.
    """
    N, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv_freq: input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv_freq: bias shape {bias.shape} != ({cout},)")
    lead, M = x.shape[:-2], x.shape[-2]
    left, right = _same_padding(N)
    cols = _im2col(x.value.reshape(-1, M, cin), N, left, right)
    wmat = kernel.value.reshape(N * cin, cout)
    out = cols @ wmat + bias.value

    def back(g):
        g2 = g.reshape(-1, M, cout)
        gw = (cols.reshape(-1, N * cin).T @ g2.reshape(-1, cout)).reshape(N, cin, cout)
        gb = g2.sum(axis=(0, 1))
        # input gradient = correlation of g with the flipped, transposed kernel
        wflip = kernel.value[::-1].transpose(0, 2, 1).reshape(N * cout, cin)
        gx = (_im2col(g2, N, right, left) @ wflip).reshape(lead + (M, cin))
        return gx, gw, gb
    return _node(out.reshape(lead + (M, cout)), (x, kernel, bias), back)


def maxpool_freq(x):
    """Non-overlapping max over pairs of feature rows; ties route to the first index."""
    M, C = x.shape[-2], x.shape[-1]
    if M % 2:
        raise ValueError(f"maxpool_freq needs an even feature length, got {M}")
    lead = x.shape[:-2]
    pairs = x.value.reshape(lead + (M // 2, 2, C))
    second = pairs[..., 1, :] > pairs[..., 0, :]
    out = np.where(second, pairs[..., 1, :], pairs[..., 0, :])

    def back(g):
        gx = np.zeros(lead + (M // 2, 2, C))
        gx[..., 0, :] = np.where(second, 0.0, g)
        gx[..., 1, :] = np.where(second, g, 0.0)
        return (gx.reshape(x.shape),)
    return _node(out, (x,), back)


def upsample_freq(x):
    """Nearest-neighbour doubling of the feature axis."""
    M, C = x.shape[-2], x.shape[-1]
    out = np.repeat(x.value, 2, axis=-2)

    def back(g):
        return (g.reshape(x.shape[:-2] + (M, 2, C)).sum(axis=-2),)
    return _node(out, (x,), back)


# -- structural --------------------------------------------------------------

def _accumulate_slice(x, index, g):
    # writes straight into the parent's gradient; the parent is always processed later
    if x.grad is None:
        x.grad = np.zeros(x.shape)
    x.grad[index] += g


def concat_channels(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_channels: shape mismatch {a.shape} vs {b.shape}")
    ca = a.shape[-1]

    def back(g):
        return g[..., :ca], g[..., ca:]
    return _node(np.concatenate([a.value, b.value], axis=-1), (a, b), back)


def split_channels(x, parts):
    """Split along channels into ``parts`` equal pieces."""
    C = x.shape[-1]
    if C % parts:
        raise ValueError(f"cannot split {C} channels into {parts} parts")
    w = C // parts
    out = []
    for k in range(parts):
        def back(g, k=k):
            _accumulate_slice(x, (Ellipsis, slice(k * w, (k + 1) * w)), g)
            return (None,)
        out.append(_node(x.value[..., k * w:(k + 1) * w], (x,), back))
    return out


def take(x, index, axis):
    """Select one slice along a leading axis (used to step through time)."""
    sl = [slice(None)] * x.value.ndim
    sl[axis] = index

    def back(g):
        _accumulate_slice(x, tuple(sl), g)
        return (None,)
    return _node(np.take(x.value, index, axis=axis), (x,), back)


def stack(tensors, axis):
    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))
    return _node(np.stack([t.value for t in tensors], axis=axis), tensors, back)


def conv_lstm_step(x, h, c, kernel, bias):
    """One ConvLSTM step without peepholes; gates ordered i, f, o, g.

    The gate pre-activations are one ``conv_freq`` over the channel
    concatenation of ``x`` and ``h``; ``kernel`` is (N, Cx+F, 4F).
    """
    if x.shape[:-1] != h.shape[:-1] or h.shape != c.shape:
        raise ValueError(f"conv_lstm_step: shapes x={x.shape} h={h.shape} c={c.shape}")
    F = h.shape[-1]
    if kernel.shape[2] != 4 * F:
        raise ValueError(f"conv_lstm_step: kernel yields {kernel.shape[2]} gate maps, need {4 * F}")
    z = conv_freq(concat_channels(x, h), kernel, bias)
    zi, zf, zo, zg = split_channels(z, 4)
    i, f, o, g = sigmoid(zi), sigmoid(zf), sigmoid(zo), tanh(zg)
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def mse_loss(pred, target, mask=None):
    """Mean squared error over rows and channels, averaged over valid frames.

    ``pred`` is (..., T, M, C); ``mask`` (shape of the leading axes, 1 for
    valid frames) removes padded frames from both numerator and count.
    """
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    M, C = pred.shape[-2:]
    if mask is None:
        mask = np.ones(pred.shape[:-2])
    mask = np.asarray(mask, dtype=float)
    if mask.shape != pred.shape[:-2]:
        raise ValueError(f"mse_loss: mask shape {mask.shape} != {pred.shape[:-2]}")
    count = mask.sum()
    if count == 0:
        raise ValueError("mse_loss: no valid frames")
    w = mask[..., None, None] / (count * M * C)
    diff = pred.value - target
    loss = np.sum(w * diff * diff)

    def back(g):
        return (g * 2.0 * w * diff,)
    return _node(loss, (pred,), back)


def total(x, weights=None):
    """Sum of all elements, optionally weighted elementwise by a constant array."""
    w = np.ones(x.shape) if weights is None else np.asarray(weights, dtype=float)

    def back(g):
        return (g * w,)
    return _node(np.sum(x.value * w), (x,), back)


# -- reverse pass ------------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, params=None):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    The graph is released afterwards; calling again on the same loss raises.
    If ``params`` is given, parameters the loss does not reach get zero gradients.
    """
    if loss.value.shape != ():
        raise GraphError("backward needs a scalar loss")
    if loss.consumed:
        raise GraphError("graph already consumed by an earlier backward; run forward again")
    if not loss.requires_grad or (not loss.parents and not isinstance(loss, Parameter)):
        raise GraphError("loss is detached from any parameter")
    order = _topological(loss)
    loss._accumulate(np.ones(()))
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(g)
        if not isinstance(node, Parameter):
            node.grad = None
        node.backward_fn = None
        node.parents = ()
    loss.consumed = True
    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros(p.shape)


# -- parameters and optimizer ------------------------------------------------

class ParamSet(OrderedDict):
    """Named parameters with Adam moment slots."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.m = {}
        self.v = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self[name] = p
        return p

    def zero_grad(self):
        for p in self.values():
            p.grad = np.zeros(p.shape)

    def clear_grad(self):
        for p in self.values():
            p.grad = None

    def count(self):
        return sum(p.value.size for p in self.values())

    def snapshot(self):
        return {k: p.value.copy() for k, p in self.items()}

    def restore(self, values):
        for k, v in values.items():
            self[k].value = np.array(v, dtype=float)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise GraphError(f"missing gradients for {missing[:3]}")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        m = params.m.get(k)
        v = params.v.get(k)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        g = p.grad
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        params.m[k], params.v[k] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    # float32-representable so that checkpoints stored as 32-bit floats round-trip exactly
    return rng.uniform(-limit, limit, size=shape).astype(np.float32).astype(float)

"""Dense float64 tensors with reverse-mode automatic differentiation.

Exactly the operations the acoustic model needs, nothing more. Data lives
in row-major numpy float64 arrays; each op result remembers its parents
and a backward closure, so the recorded graph is topological by
construction. ``backward`` seeds a scalar loss with gradient 1 and walks
the graph once, accumulating into ``.grad`` (shared parameters therefore
pick up one contribution per use).

No GPU, no mixed precision, no broadcasting beyond what the model needs.
"""

from __future__ import annotations

import contextlib

import numpy as np


class TensorError(ValueError):
    """Shape or contract violation in a tensor operation."""


class ConfigError(ValueError):
    """Structurally invalid configuration value."""


class NumericError(FloatingPointError):
    """NaN or Inf surfaced where finite values are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x, name=""):
    """A tensor that never tracks gradients (masks, frozen inputs)."""
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False, name=name)


def _make(data, parents, backward_fn):
    """Create an op result; records the closure only while grads are on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Populate ``.grad`` of every reachable requires_grad tensor.

    ``loss`` must be scalar. Each recorded node is visited exactly once
    in reverse topological order (consumers before producers), so shared
    inputs accumulate all their contributions before propagating.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("backward() on a tensor with no recorded graph")

    # Iterative post-order DFS; recursion would overflow on long recurrences.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def assert_finite(t, name=""):
    """Raise NumericError if the tensor holds NaN or Inf."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        label = name or (t.name if isinstance(t, Tensor) else "") or "tensor"
        n_bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericError(f"{label}: {n_bad} non-finite entries")
    return t


# ---------------------------------------------------------------------------
# elementwise and arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def scale(a, s):
    """Multiply by a plain float (no gradient for the scalar)."""
    a = as_tensor(a)
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bwd)


def pow_const(a, p):
    """Elementwise a**p for float p >= 0; gradient at a == 0 defined as 0."""
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(a.data == 0.0, 0.0, p * a.data ** (p - 1.0))
        _accum(a, g * d)

    return _make(data, (a,), bwd)


def _stable_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    a = as_tensor(a)
    data = _stable_sigmoid(a.data)

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def swish(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    sig = _stable_sigmoid(a.data)
    data = a.data * sig

    def bwd(g):
        _accum(a, g * (sig + a.data * sig * (1.0 - sig)))

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bwd)


def narrow(a, axis, start, length):
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise TensorError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(a.data[idx].copy(), (a,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(data, tuple(tensors), bwd)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape))

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading batch dimensions broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), bwd)


def linear(x, w, b=None):
    """x @ w (+ b over the last axis)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# normalization and attention primitives
# ---------------------------------------------------------------------------

LAYER_NORM_EPS = 1e-12


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps is tiny (1e-12) so the unit-variance contract holds to ~1e-10 on
    inputs with O(1) spread.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accum(bias, g.sum(axis=lead))
        _accum(gain, (g * y).sum(axis=lead))
        dy = g * gain.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True))
        _accum(x, dx)

    del d
    return _make(data, (x, gain, bias), bwd)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    return _make(s, (a,), bwd)


def masked_softmax(logits, key_mask):
    """Softmax over the last axis with invalid keys excluded.

    ``key_mask`` is a boolean array broadcastable to the logits; False
    entries get -inf before normalization. A row with no valid key
    yields all zeros rather than NaN.
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), logits.shape)
    z = np.where(mask, logits.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # rows with no valid key
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True)
    s = e / np.where(denom > 0.0, denom, 1.0)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(logits, s * (g - dot))

    return _make(s, (logits,), bwd)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def bwd(g):
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bwd)


def glu(a, axis=-1):
    """Gated linear unit: split the axis in half, first * sigmoid(second)."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % 2 != 0:
        raise TensorError(f"glu axis size must be even, got {n}")
    lhs = narrow(a, axis, 0, n // 2)
    gate = narrow(a, axis, n // 2, n // 2)
    return mul(lhs, sigmoid(gate))


def dropout(a, p, rng):
    """Inverted dropout: scales by 1/(1-p) so evaluation is the identity."""
    a = as_tensor(a)
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise ConfigError(f"dropout rate must be < 1, got {p}")
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)

    def bwd(g):
        _accum(a, g * keep)

    return _make(a.data * keep, (a,), bwd)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------


def gather_last(a, idx):
    """Pick one entry along the last axis per leading position.

    a: [..., L], idx: integer array [...]; out[...] = a[..., idx[...]].
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise TensorError(f"gather_last index shape {idx.shape} vs data {a.shape}")
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros_like(a.data)
        # one target per row, so no collisions
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accum(a, full)

    return _make(data, (a,), bwd)


def gather_rel(a, idx):
    """Expand per-query relative scores onto the key axis.

    a: [..., T, L] scores per relative offset, idx: [T, T] integer map;
    out[..., i, j] = a[..., i, idx[i, j]]. Clamped offsets repeat, so the
    backward pass scatter-adds.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    t = a.shape[-2]
    if idx.shape != (t, t):
        raise TensorError(f"gather_rel index shape {idx.shape}, expected {(t, t)}")
    rows = np.arange(t)[:, None]
    data = a.data[..., rows, idx]

    def bwd(g):
        ga = np.zeros((int(np.prod(a.shape[:-2], initial=1)), t, a.shape[-1]))
        gg = g.reshape((-1, t, t))
        bidx = np.arange(ga.shape[0])[:, None, None]
        np.add.at(ga, (bidx, rows[None, :, :], idx[None, :, :]), gg)
        _accum(a, ga.reshape(a.shape))

    return _make(data, (a,), bwd)


def gather_time(a, idx):
    """Permute time per batch entry: out[b, t] = a[b, idx[b, t]].

    a: [B, T, C], idx: [B, T]. Used to reverse variable-length sequences.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:2]:
        raise TensorError(f"gather_time index shape {idx.shape} vs data {a.shape}")
    b_idx = np.arange(a.shape[0])[:, None]
    data = a.data[b_idx, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (b_idx, idx), g)
        _accum(a, ga)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# convolutions and pooling
# ---------------------------------------------------------------------------


def _same_pad(k):
    """Left/right padding for the same-length convention."""
    left = (k - 1) // 2
    return left, k - 1 - left


def conv2d(x, kernel, stride_t=1):
    """2-d convolution over (time, feature) with channels last.

    x: [B, T, F, Cin] (or [T, F, Cin]); kernel: [kh, kw, Cin, Cout];
    same padding on both axes, stride applies to time only, so the output
    is [B, ceil(T / stride_t), F, Cout].
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise TensorError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")
    if kernel.ndim != 4:
        raise TensorError(f"conv2d kernel must be 4-d, got shape {kernel.shape}")
    b, t, f, cin = xd.shape
    kh, kw, kcin, cout = kernel.shape
    if t == 0:
        raise TensorError("conv2d on empty (zero-length) input")
    if cin != kcin:
        raise TensorError(f"conv2d channels disagree: input {cin}, kernel {kcin}")
    if stride_t < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride_t}")

    out_t = -(-t // stride_t)  # ceil
    plt, prt = _same_pad(kh)
    plf, prf = _same_pad(kw)
    xp = np.pad(xd, ((0, 0), (plt, prt), (plf, prf), (0, 0)))
    out = np.zeros((b, out_t, f, cout))
    t_stop = (out_t - 1) * stride_t + 1
    for dh in range(kh):
        xs = xp[:, dh:dh + t_stop:stride_t]
        for dw in range(kw):
            out += np.matmul(xs[:, :, dw:dw + f, :], kernel.data[dh, dw])

    def bwd(g):
        if squeeze:
            gg = g[None]
        else:
            gg = g
        gk = np.zeros_like(kernel.data)
        gxp = np.zeros_like(xp)
        for dh in range(kh):
            xs = xp[:, dh:dh + t_stop:stride_t]
            for dw in range(kw):
                win = xs[:, :, dw:dw + f, :]
                gk[dh, dw] = np.einsum("btfi,btfo->io", win, gg)
                gxp[:, dh:dh + t_stop:stride_t, dw:dw + f, :] += np.matmul(
                    gg, kernel.data[dh, dw].T
                )
        gx = gxp[:, plt:plt + t, plf:plf + f, :]
        _accum(x, gx[0] if squeeze else gx)
        _accum(kernel, gk)

    return _make(out[0] if squeeze else out, (x, kernel), bwd)


def depthwise_conv1d(x, kernel):
    """Per-channel 1-d convolution over time with same padding.

    x: [B, T, C] (or [T, C]); kernel: [k, C]. Length is preserved.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise TensorError(f"depthwise_conv1d input must be 2-d or 3-d, got {x.shape}")
    b, t, c = xd.shape
    k, kc = kernel.shape
    if kc != c:
        raise TensorError(f"depthwise_conv1d channels disagree: input {c}, kernel {kc}")
    pl, pr = _same_pad(k)
    xp = np.pad(xd, ((0, 0), (pl, pr), (0, 0)))
    out = np.zeros((b, t, c))
    for j in range(k):
        out += xp[:, j:j + t, :] * kernel.data[j]

    def bwd(g):
        gg = g[None] if squeeze else g
        gk = np.zeros_like(kernel.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gk[j] = np.einsum("btc,btc->c", xp[:, j:j + t, :], gg)
            gxp[:, j:j + t, :] += gg * kernel.data[j]
        gx = gxp[:, pl:pl + t, :]
        _accum(x, gx[0] if squeeze else gx)
        _accum(kernel, gk)

    return _make(out[0] if squeeze else out, (x, kernel), bwd)


def transposed_conv1d(x, kernel, stride):
    """Learned upsampling; the filter width must equal the stride.

    x: [B, T', C] (or [T', C]); kernel: [k, C, Cout] with k == stride, so
    each input frame expands into a disjoint block of k output frames and
    the output length is exactly T' * stride.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    k, c, cout = kernel.shape
    if k != stride:
        raise ConfigError(
            f"transposed_conv1d filter width {k} must equal stride {stride}"
        )
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b, t, xc = xd.shape
    if xc != c:
        raise TensorError(f"transposed_conv1d channels disagree: input {xc}, kernel {c}")
    out = np.einsum("btc,kco->btko", xd, kernel.data).reshape(b, t * k, cout)

    def bwd(g):
        gg = g[None] if squeeze else g
        g4 = gg.reshape(b, t, k, cout)
        gx = np.einsum("btko,kco->btc", g4, kernel.data)
        gk = np.einsum("btc,btko->kco", xd, g4)
        _accum(x, gx[0] if squeeze else gx)
        _accum(kernel, gk)

    return _make(out[0] if squeeze else out, (x, kernel), bwd)


def max_pool_axis(x, axis, width):
    """Max pooling with window == stride == width along one axis.

    Ceil semantics: a partial window at the end is allowed, so the axis
    shrinks from N to ceil(N / width). Gradients route to the argmax.
    """
    x = as_tensor(x)
    n = x.shape[axis]
    n_out = -(-n // width)
    xm = np.moveaxis(x.data, axis, -1)
    pad = n_out * width - n
    if pad:
        xm = np.concatenate([xm, np.full(xm.shape[:-1] + (pad,), -np.inf)], axis=-1)
    xw = xm.reshape(xm.shape[:-1] + (n_out, width))
    arg = xw.argmax(axis=-1)
    data = np.take_along_axis(xw, arg[..., None], axis=-1)[..., 0]
    out = np.moveaxis(data, -1, axis)

    def bwd(g):
        gm = np.moveaxis(g, axis, -1)
        gw = np.zeros(xm.shape[:-1] + (n_out, width))
        np.put_along_axis(gw, arg[..., None], gm[..., None], axis=-1)
        gflat = gw.reshape(xm.shape)
        if pad:
            gflat = gflat[..., :n]
        _accum(x, np.moveaxis(gflat, -1, axis))

    return _make(out, (x,), bwd)


def max_pool_feature(x, width=2):
    """Max pool over the feature axis of [B, T, F, C] (or [T, F, C])."""
    axis = x.ndim - 2
    return max_pool_axis(x, axis, width)


def max_pool_time(x, stride):
    """Max pool over the time axis of [B, T, C] or [T, C]: T -> ceil(T / stride)."""
    axis = 1 if x.ndim == 3 else 0
    return max_pool_axis(x, axis, stride)

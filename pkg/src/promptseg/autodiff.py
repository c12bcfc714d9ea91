"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 for training and inference,
float64 for gradient checks; the dtype of the wrapped array wins).
Broadcasting is limited to scalars and trailing-suffix shapes (a leading
batch dimension); anything else raises a ShapeError naming the op.

All kernels are plain numpy calls with a fixed reduction order, so results
are bit-reproducible for identical inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "ShapeError", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "pow_const",
    "reshape", "transpose", "concat", "narrow",
    "tsum", "tmean", "log", "exp", "sigmoid", "softplus", "relu", "gelu",
    "softmax", "layernorm", "patch_embed", "maxpool2x2",
    "bilinear_upsample", "attention", "rope2d",
]


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'yes' if self.requires_grad else 'no'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    """Create an output tensor, recording the edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) for every reachable leaf.

    ``loss`` must be scalar; each graph may be walked once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad (graph absent or already consumed)")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None  # consume: a second walk would silently miss edges
            node._parents = ()
    loss.requires_grad = False


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g, shape):
    """Sum gradient g down to a trailing-suffix shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    if g.shape != tuple(shape):
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return g


def _check_suffix(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_suffix("add", a, b)
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_suffix("sub", a, b)
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_suffix("mul", a, b)
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_suffix("div", a, b)
    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _node(a.data / b.data, (a, b), bw)


def neg(a):
    a = _as_tensor(a)
    def bw(g):
        _accum(a, -g)
    return _node(-a.data, (a,), bw)


def pow_const(a, p):
    a = _as_tensor(a)
    p = float(p)
    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))
    return _node(a.data ** p, (a,), bw)


# ---------------------------------------------------------------------------
# matmul and structural ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: incompatible shapes {sa} x {sb}")
    if len(sa) > 2 and len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch dims differ {sa} x {sb}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != sa:  # a is 2D, b batched
                ga = ga.reshape(-1, *sa).sum(axis=0) if ga.ndim > len(sa) else ga
            _accum(a, ga)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.shape != sb:  # b is 2D, a batched
                gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            _accum(b, gb)

    return _node(out, (a, b), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)
    def bw(g):
        _accum(a, g.transpose(inv))
    return _node(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if not 0 <= start <= start + length <= a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)
    return _node(a.data[index].copy(), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape).copy())
    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def log(a):
    a = _as_tensor(a)
    def bw(g):
        _accum(a, g / a.data)
    return _node(np.log(a.data), (a,), bw)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    def bw(g):
        _accum(a, g * out)
    return _node(out, (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    out = special.expit(a.data)
    def bw(g):
        _accum(a, g * out * (1.0 - out))
    return _node(out, (a,), bw)


def softplus(a):
    """log(1 + e^x), computed stably; the gradient is sigmoid(x)."""
    a = _as_tensor(a)
    out = np.logaddexp(np.asarray(0.0, dtype=a.dtype), a.data)
    def bw(g):
        _accum(a, g * special.expit(a.data))
    return _node(out, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    def bw(g):
        _accum(a, g * (a.data > 0))
    return _node(np.maximum(a.data, 0), (a,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _accum(a, g * (cdf + a.data * pdf))
    return _node(a.data * cdf, (a,), bw)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))
    return _node(out, (a,), bw)


def layernorm(a, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - out * gx))
    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# spatial ops


def patch_embed(a, patch_size, stride=None):
    """Unfold a 2D image (H, W) into flattened patches (n_patches, p*p)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"patch_embed: expected (H, W), got {a.shape}")
    p = int(patch_size)
    stride = p if stride is None else int(stride)
    h, w = a.shape
    if h < p or w < p:
        raise ShapeError(f"patch_embed: patch {p} larger than image {a.shape}")
    nh = (h - p) // stride + 1
    nw = (w - p) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(a.data, (p, p))[::stride, ::stride]
    out = windows.reshape(nh * nw, p * p).copy()

    def bw(g):
        g = g.reshape(nh, nw, p, p)
        full = np.zeros_like(a.data)
        for dy in range(p):
            for dx in range(p):
                full[dy : dy + nh * stride : stride, dx : dx + nw * stride : stride] += g[:, :, dy, dx]
        _accum(a, full)

    return _node(out, (a,), bw)


def maxpool2x2(a):
    """2x2 max pooling over a (H, W, C) grid; H and W must be even."""
    a = _as_tensor(a)
    if a.ndim != 3 or a.shape[0] % 2 or a.shape[1] % 2:
        raise ShapeError(f"maxpool2x2: need even (H, W, C), got {a.shape}")
    h2, w2, c = a.shape[0] // 2, a.shape[1] // 2, a.shape[2]
    windows = a.data.reshape(h2, 2, w2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h2, w2, c, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        full = gw.reshape(h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(a.shape)
        _accum(a, full)

    return _node(out, (a,), bw)


def _interp_matrix(n_in, factor, dtype):
    """Dense 1D bilinear upsampling operator (n_in*factor, n_in)."""
    n_out = n_in * factor
    coords = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(coords).astype(int), 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    w1 = np.clip(coords - i0, 0.0, 1.0)
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat


def bilinear_upsample(a, factor):
    """Bilinearly upsample (H, W, C) by an integer factor (center-aligned)."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"bilinear_upsample: expected (H, W, C), got {a.shape}")
    factor = int(factor)
    ah = _interp_matrix(a.shape[0], factor, a.dtype)
    aw = _interp_matrix(a.shape[1], factor, a.dtype)
    out = np.einsum("hi,iwc->hwc", ah, np.einsum("wj,ijc->iwc", aw, a.data))

    def bw(g):
        gi = np.einsum("hi,hwc->iwc", ah, g)
        _accum(a, np.einsum("wj,iwc->ijc", aw, gi))

    return _node(out, (a,), bw)


def attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v; optional additive mask on the scores."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d))
    if mask is not None:
        scores = add(scores, _as_tensor(mask, scores.dtype))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _rope_angles(grid_h, grid_w, dim, base_theta, dtype):
    """Per-token rotation angles: half the pairs follow the row index,
    half the column index."""
    if dim % 4:
        raise ShapeError(f"rope2d: head dim {dim} not divisible by 4")
    half = dim // 2  # dims rotated per axis
    pairs = half // 2
    freqs = base_theta ** (-np.arange(pairs, dtype=np.float64) * 2.0 / half)
    rows = np.repeat(np.arange(grid_h), grid_w).astype(np.float64)
    cols = np.tile(np.arange(grid_w), grid_h).astype(np.float64)
    angles = np.concatenate(
        [rows[:, None] * freqs[None, :], cols[:, None] * freqs[None, :]], axis=1
    )  # (N, dim/2)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope2d(a, grid_h, grid_w, base_theta=10000.0):
    """Rotary position encoding over a 2D token grid.

    ``a`` has shape (..., N, D) with N == grid_h*grid_w; adjacent feature
    pairs (2i, 2i+1) rotate by a position-dependent angle, so per-token
    norms are preserved.
    """
    a = _as_tensor(a)
    n = grid_h * grid_w
    if a.shape[-2] != n:
        raise ShapeError(f"rope2d: token count {a.shape[-2]} != grid {grid_h}x{grid_w}")
    cos, sin = _rope_angles(grid_h, grid_w, a.shape[-1], base_theta, a.dtype)
    x = a.data
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos

    def bw(g):
        g_even, g_odd = g[..., 0::2], g[..., 1::2]
        gi = np.empty_like(g)
        gi[..., 0::2] = g_even * cos + g_odd * sin  # inverse rotation
        gi[..., 1::2] = -g_even * sin + g_odd * cos
        _accum(a, gi)

    return _node(out, (a,), bw)

"""Dense float tensors with reverse-mode automatic differentiation.

numpy supplies the array arithmetic; this module owns the operator set, the
gradient tape and a finite-difference gradient checker.  Storage is float32
by default (float64 opt-in for numerical verification), reductions accumulate
in float64, and broadcasting is deliberately restricted to scalar-with-tensor
and equal-shape operands.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyForegroundError,
    InvalidBatchError,
    NonFiniteError,
)

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    # numpy arrays and numpy scalars keep their float dtype; everything else
    # (python numbers, lists, int arrays) becomes the float32 default.
    if isinstance(data, (np.ndarray, np.floating)):
        arr = np.asarray(data)
        if arr.dtype in _FLOAT_DTYPES:
            return arr
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """N-dimensional float array, optionally recording ops for backward().

    ``data`` is a row-major numpy array; ``grad`` is filled by ``backward``
    for tensors created with ``requires_grad=True``.  Tensors produced by
    operations keep references to their parents so a backward pass can be
    scheduled in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    @classmethod
    def from_op(cls, data, parents, backward_fn):
        """Wrap an op result; ``backward_fn(grad)`` propagates into parents.

        Public so tests can build custom ops (e.g. a deliberately corrupted
        backward as a gradcheck negative control).
        """
        arr = np.asarray(data)  # op results keep the dtype numpy promotion gave them
        out = cls(arr, dtype=arr.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------
    def detach(self):
        """A view of the same values with no graph attached."""
        return Tensor(self.data, name=self.name)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self.data.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.data.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.data.dtype))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise DimensionError("tensor/tensor division is not supported; divide by a python scalar")
        return mul(self, _lift(1.0 / scalar, self.data.dtype))

    def __neg__(self):
        return mul(self, _lift(-1.0, self.data.dtype))

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_binary(a, b, op):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable")


def _acc(t, g):
    """Accumulate gradient ``g`` into tensor ``t`` (no-op for constants)."""
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _acc_reduced(t, g):
    """Like _acc but collapses a broadcast gradient back to t's shape."""
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        g = np.asarray(g.sum(dtype=np.float64), dtype=t.data.dtype).reshape(t.shape)
    _acc(t, g)


# ---------------------------------------------------------------------------
# backward pass / tape
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the ops reachable from a scalar root.

    Built lazily at backward time from the parent links the ops recorded;
    every node's inputs precede it in ``nodes``.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def build(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run(self):
        for node in reversed(self.nodes):
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)


def backward(loss):
    """Reverse-mode gradients of a scalar loss into all requires_grad leaves."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran for this graph; rebuild the forward first")
    loss.grad = np.ones_like(loss.data)
    Tape.build(loss).run()
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    _check_binary(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        _acc_reduced(a, g)
        _acc_reduced(b, g)

    return Tensor.from_op(out, (a, b), bwd)


def sub(a, b):
    _check_binary(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        _acc_reduced(a, g)
        _acc_reduced(b, -g)

    return Tensor.from_op(out, (a, b), bwd)


def mul(a, b):
    _check_binary(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        _acc_reduced(a, g * b.data)
        _acc_reduced(b, g * a.data)

    return Tensor.from_op(out, (a, b), bwd)


def exp(t):
    with np.errstate(over="ignore"):
        out = np.exp(t.data)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("exp produced non-finite values")

    def bwd(g):
        _acc(t, g * out)

    return Tensor.from_op(out, (t,), bwd)


def atan(t):
    out = np.arctan(t.data)

    def bwd(g):
        _acc(t, g / (1.0 + t.data * t.data))

    return Tensor.from_op(out, (t,), bwd)


def square(t):
    out = t.data * t.data

    def bwd(g):
        _acc(t, 2.0 * t.data * g)

    return Tensor.from_op(out, (t,), bwd)


def tanh(t):
    out = np.tanh(t.data)

    def bwd(g):
        _acc(t, g * (1.0 - out * out))

    return Tensor.from_op(out, (t,), bwd)


def leaky_relu(t, slope=0.2):
    """x for x >= 0 else slope*x; the subgradient at 0 is the slope."""
    factor = np.where(t.data > 0, t.data.dtype.type(1), t.data.dtype.type(slope))
    out = t.data * factor

    def bwd(g):
        _acc(t, g * factor)

    return Tensor.from_op(out, (t,), bwd)


def relu(t):
    return leaky_relu(t, 0.0)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(t, axis=None):
    """Sum with float64 accumulation, cast back to the tensor's dtype."""
    out = np.asarray(t.data.sum(axis=axis, dtype=np.float64), dtype=t.data.dtype)

    def bwd(g):
        if axis is None:
            gx = np.broadcast_to(np.asarray(g), t.shape)
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis), t.shape)
        _acc(t, np.ascontiguousarray(gx))

    return Tensor.from_op(out, (t,), bwd)


def tensor_mean(t, axis=None):
    n = t.data.size if axis is None else np.prod([t.shape[a] for a in np.atleast_1d(axis)])
    return tensor_sum(t, axis) * (1.0 / float(n))


def masked_mean(values, mask=None):
    """Mean over entries where mask==1 (all entries when mask is None).

    ``mask`` may be an array/Tensor of the same shape, or one trailing-shape
    slice (e.g. [H,W] against [N,H,W]) which is tiled over the batch.
    Raises EmptyForegroundError when the mask selects nothing.
    """
    if mask is None:
        return values.mean()
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(values.data.dtype)
    if m.shape != values.shape:
        if values.ndim == m.ndim + 1 and values.shape[1:] == m.shape:
            m = np.broadcast_to(m, values.shape)
        else:
            raise DimensionError(f"mask shape {m.shape} does not match values shape {values.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    count = float(m.sum(dtype=np.float64))
    if count == 0:
        raise EmptyForegroundError("mask selects no foreground pixels")
    return (values * Tensor(np.ascontiguousarray(m))).sum() * (1.0 / count)


# ---------------------------------------------------------------------------
# channel ops (channel axis is the third-from-last: [C,H,W] or [N,C,H,W])
# ---------------------------------------------------------------------------

def _channel_axis(t):
    if t.ndim == 3:
        return 0
    if t.ndim == 4:
        return 1
    raise DimensionError(f"expected a [C,H,W] or [N,C,H,W] tensor, got shape {t.shape}")


def _narrow(t, axis, start, stop):
    idx = (slice(None),) * axis + (slice(start, stop),)
    out = np.ascontiguousarray(t.data[idx])

    def bwd(g):
        gx = np.zeros_like(t.data)
        gx[idx] = g
        _acc(t, gx)

    return Tensor.from_op(out, (t,), bwd)


def split_half(t):
    """Split evenly along the channel axis into (first half, second half)."""
    ax = _channel_axis(t)
    c = t.shape[ax]
    if c % 2 != 0:
        raise DimensionError(f"split_half needs an even channel count, got {c}")
    return _narrow(t, ax, 0, c // 2), _narrow(t, ax, c // 2, c)


def concat(parts):
    """Concatenate along the channel axis; inverse of split_half for two halves."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ax = _channel_axis(parts[0])
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise DimensionError("concat: mixed tensor ranks")
        if p.shape[:ax] != parts[0].shape[:ax] or p.shape[ax + 1:] != parts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: non-channel dims differ: {p.shape} vs {parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bwd(g):
        for p, gp in zip(parts, np.split(g, splits, axis=ax)):
            _acc(p, np.ascontiguousarray(gp))

    return Tensor.from_op(out, tuple(parts), bwd)


def _check_perm(perm, c):
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (c,) or not np.array_equal(np.sort(perm), np.arange(c)):
        raise DimensionError(f"perm must be a permutation of 0..{c - 1}")
    return perm


def channel_permute(t, perm):
    """Reorder channels: out[..., i, :, :] = in[..., perm[i], :, :]."""
    ax = _channel_axis(t)
    perm = _check_perm(perm, t.shape[ax])
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out = np.ascontiguousarray(np.take(t.data, perm, axis=ax))

    def bwd(g):
        _acc(t, np.ascontiguousarray(np.take(g, inv, axis=ax)))

    return Tensor.from_op(out, (t,), bwd)


def _unshuffle_array(x, d):
    if x.ndim == 3:
        c, h, w = x.shape
        out = x.reshape(c, h // d, d, w // d, d).transpose(0, 2, 4, 1, 3)
        return np.ascontiguousarray(out).reshape(c * d * d, h // d, w // d)
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // d, d, w // d, d).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(n, c * d * d, h // d, w // d)


def _shuffle_array(x, d):
    if x.ndim == 3:
        cdd, h, w = x.shape
        c = cdd // (d * d)
        out = x.reshape(c, d, d, h, w).transpose(0, 3, 1, 4, 2)
        return np.ascontiguousarray(out).reshape(c, h * d, w * d)
    n, cdd, h, w = x.shape
    c = cdd // (d * d)
    out = x.reshape(n, c, d, d, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(n, c, h * d, w * d)


def pixel_unshuffle(t, d):
    """[C,H,W] -> [C*d*d, H/d, W/d]: each d x d patch becomes d*d channels."""
    ax = _channel_axis(t)
    h, w = t.shape[ax + 1], t.shape[ax + 2]
    if d < 1 or h % d != 0 or w % d != 0:
        raise DimensionError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by {d}")
    out = _unshuffle_array(t.data, d)

    def bwd(g):
        _acc(t, _shuffle_array(g, d))

    return Tensor.from_op(out, (t,), bwd)


def pixel_shuffle(t, d):
    """Exact inverse of pixel_unshuffle: [C*d*d, H, W] -> [C, H*d, W*d]."""
    ax = _channel_axis(t)
    if d < 1 or t.shape[ax] % (d * d) != 0:
        raise DimensionError(f"pixel_shuffle: channel count {t.shape[ax]} not divisible by {d * d}")
    out = _shuffle_array(t.data, d)

    def bwd(g):
        _acc(t, _unshuffle_array(g, d))

    return Tensor.from_op(out, (t,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, padding="same"):
    """Cross-correlation of [C,H,W] or [N,C,H,W] input with [Cout,Cin,k,k] weights.

    ``padding`` is "same" (odd k preserves H,W) or "valid".  Differentiable
    w.r.t. input, weight and bias.
    """
    if padding not in ("same", "valid"):
        raise DimensionError(f"unknown padding mode {padding!r}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3- or 4-dimensional, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be [Cout,Cin,k,k], got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 != 1:
        raise DimensionError(f"conv2d kernel size must be odd, got {k}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    pad = k // 2 if padding == "same" else 0
    if padding == "valid" and (h < k or w < k):
        raise DimensionError(f"conv2d: input {h}x{w} smaller than kernel {k}")
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = xd
    else:
        xp = xd
    ho, wo = h if padding == "same" else h - k + 1, w if padding == "same" else w - k + 1

    # im2col in channel-major layout: only cheap slab copies, no transposes.
    cols = np.empty((n, c_in, k, k, ho, wo), dtype=xd.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a:a + ho, b:b + wo]
    cols3 = cols.reshape(n, c_in * k * k, ho * wo)
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out3 = np.matmul(w_mat, cols3)
    if bias is not None:
        out3 += bias.data[:, None]
    out = out3.reshape(n, c_out, ho, wo)

    def bwd(g):
        gd = g[None] if single else g
        g3 = gd.reshape(n, c_out, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0)
            _acc(weight, dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _acc(bias, np.asarray(g3.sum(axis=(0, 2), dtype=np.float64), dtype=bias.data.dtype))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g3).reshape(n, c_in, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    dxp[:, :, a:a + ho, b:b + wo] += dcols[:, :, a, b]
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            _acc(x, dx[0] if single else dx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out[0] if single else out, parents, bwd)


class Conv2d:
    """Convolution layer: parameter container around conv2d.

    Pass ``bias=False`` for convs feeding straight into batch norm, where a
    bias would be cancelled by the mean subtraction and only add dead
    parameters.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, rng=None,
                 weight_scale=None, bias=True, dtype=DEFAULT_DTYPE, name="conv"):
        rng = np.random.default_rng(rng)
        fan_in = in_channels * kernel_size * kernel_size
        scale = math.sqrt(2.0 / fan_in) if weight_scale is None else weight_scale
        w = rng.normal(0.0, scale, size=(out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x, padding="same"):
        return conv2d(x, self.weight, self.bias, padding)

    def parameters(self):
        params = [(self.weight.name, self.weight)]
        if self.bias is not None:
            params.append((self.bias.name, self.bias))
        return params


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Learnable scale/shift plus running statistics for batchnorm2d."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE, name="bn"):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def channels(self):
        return self.gamma.shape[0]

    def parameters(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]


def batchnorm2d(x, state, mode):
    """Per-channel batch normalization over [N,C,H,W] (or a single [C,H,W]).

    "train" normalizes by batch statistics and updates the running buffers
    with the state's momentum; "eval" normalizes by the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"batchnorm2d input must be 3- or 4-dimensional, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if c != state.channels:
        raise DimensionError(f"batchnorm2d: {c} input channels vs state with {state.channels}")
    dtype = x.data.dtype
    axes = (0, 2, 3)
    gamma, beta = state.gamma, state.beta

    if mode == "train":
        count = n * h * w
        if count < 2:
            raise InvalidBatchError(f"batch statistics need at least 2 elements, got {count}")
        mean64 = xd.mean(axis=axes, dtype=np.float64)
        centered = xd - mean64.astype(dtype)[None, :, None, None]
        var64 = np.mean(centered.astype(np.float64) ** 2, axis=axes)
        inv = (1.0 / np.sqrt(var64 + state.eps)).astype(dtype)
        xhat = centered * inv[None, :, None, None]
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean.astype(np.float64) + m * mean64).astype(dtype)
        unbiased = var64 * (count / (count - 1))
        state.running_var = ((1.0 - m) * state.running_var.astype(np.float64) + m * unbiased).astype(dtype)
    else:
        inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)).astype(dtype)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        gd = g[None] if single else g
        if gamma.requires_grad:
            _acc(gamma, np.asarray((gd * xhat).sum(axis=axes, dtype=np.float64), dtype=dtype))
        if beta.requires_grad:
            _acc(beta, np.asarray(gd.sum(axis=axes, dtype=np.float64), dtype=dtype))
        if x.requires_grad:
            dxhat = gd * gamma.data[None, :, None, None]
            if mode == "train":
                cnt = n * h * w
                s1 = np.asarray(dxhat.sum(axis=axes, dtype=np.float64), dtype=dtype)
                s2 = np.asarray((dxhat * xhat).sum(axis=axes, dtype=np.float64), dtype=dtype)
                dx = (inv[None, :, None, None] / cnt) * (
                    cnt * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
                )
            else:
                dx = dxhat * inv[None, :, None, None]
            _acc(x, dx[0] if single else dx)

    return Tensor.from_op(out[0] if single else out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(f, point, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor and be twice differentiable
    near ``point``.  The error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    base = np.array(point.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"gradcheck function must return a scalar, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("gradcheck: function value is not finite")
    out.backward()
    analytic = (np.zeros_like(base) if probe.grad is None else probe.grad).astype(np.float64).ravel()

    def evaluate(arr):
        val = f(Tensor(arr))
        v = float(val.data.reshape(()))
        if not math.isfinite(v):
            raise NonFiniteError("gradcheck: function value is not finite")
        return v

    flat = base.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi_x, hi = float(flat[i]), evaluate(base)
        flat[i] = orig - h
        lo_x, lo = float(flat[i]), evaluate(base)
        flat[i] = orig
        numeric[i] = (hi - lo) / (hi_x - lo_x)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0

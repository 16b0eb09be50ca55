"""Differentiable primitive operations over :class:`~lmiinet.tensor.Tensor`.

Every function computes its result with numpy and, when a tape is active
on the current thread, records a node whose backward rule returns one
gradient array per input (None for non-differentiable inputs).

Binary elementwise operations support full numpy broadcasting; their
backward rules sum gradients back over broadcast axes, which covers the
per-channel (1, C, 1, 1) coefficient patterns used throughout the blocks.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError, DataError
from .tensor import Tensor, active_tape

# ---------------------------------------------------------------------------
# recording / broadcast helpers
# ---------------------------------------------------------------------------


def _record(op, inputs, out, backward_fn):
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _record("div", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no tensor allocated for the constant)."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.dtype))

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + np.asarray(float(s), dtype=a.dtype))

    def bwd(g):
        return (g,)

    return _record("add_scalar", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def bwd(g):
        return (_relu_backward(g, mask),)

    return _record("relu", (a,), out, bwd)


def _relu_backward(g, mask):
    # module-level so tests can substitute a corrupted rule
    return g * mask


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _record("gelu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bwd(g):
        return (_sigmoid_backward(g, y),)

    return _record("sigmoid", (a,), out, bwd)


def _sigmoid_backward(g, y):
    return g * y * (1.0 - y)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise power with fixed exponent; inputs must be nonnegative for
    non-integer exponents."""
    p = float(p)
    x = a.data
    out = Tensor(x**p)

    def bwd(g):
        return (g * p * x ** (p - 1.0),)

    return _record("power", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum_all", (a,), out, bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum_axis", (a,), out, bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record("reshape", (a,), out, bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", (a,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional broadcast leading batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape} (axis -1 vs -2)"
        )
    out = Tensor(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (a,), out, bwd)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray, ignore_index=None) -> Tensor:
    """Mean pixel cross-entropy from raw logits.

    logits: (N, K, H, W); labels: integer (N, H, W).  Pixels equal to
    ``ignore_index`` are excluded from the mean.  Uses the log-sum-exp form
    with max subtraction for stability.
    """
    x = logits.data
    if x.ndim != 4:
        raise ShapeError(f"cross_entropy expects (N, K, H, W) logits, got {logits.shape}")
    n, k, h, w = x.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits spatial shape {(n, h, w)}"
        )
    if ignore_index is None:
        valid = np.ones((n, h, w), dtype=bool)
    else:
        valid = labels != ignore_index
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        bad = np.argwhere(valid & ((labels < 0) | (labels >= k)))[0]
        value = labels[tuple(bad)]
        raise DataError(
            f"label {value} out of range [0, {k}) at pixel (n={bad[0]}, y={bad[1]}, x={bad[2]})"
        )
    count = int(valid.sum())
    if count == 0:
        raise DataError("cross_entropy: every pixel is ignored")

    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))  # (N, H, W)
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(x, safe_labels[:, None], axis=1)[:, 0]
    loss = float(((lse - picked) * valid).sum() / count)
    out = Tensor(np.asarray(loss, dtype=x.dtype))

    def bwd(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, safe_labels[:, None], 1.0, axis=1)
        grad = (p - onehot) * valid[:, None]
        return (grad * (g / count),)

    return _record("cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Normalize (N, C, H, W) per channel over the N, H, W axes.

    In training mode the batch statistics normalize the output and the
    running buffers are updated in place with the fixed momentum; in eval
    mode the running buffers are used and nothing is mutated.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects rank-4 input, got {x.shape}")
    xd = x.data
    axes = (0, 2, 3)
    c = xd.shape[1]
    gshape = (1, c, 1, 1)
    gd = gamma.data.reshape(gshape)
    bd = beta.data.reshape(gshape)
    if training:
        mean = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c)
    else:
        mean = running_mean.reshape(gshape).astype(xd.dtype, copy=False)
        var = running_var.reshape(gshape).astype(xd.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = Tensor(gd * xhat + bd)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        dbeta = g.sum(axis=axes).reshape(beta.shape)
        if training:
            gsum = g.sum(axis=axes, keepdims=True)
            gxsum = (g * xhat).sum(axis=axes, keepdims=True)
            dx = (gd * inv) * (g - gsum / m - xhat * gxsum / m)
        else:
            dx = g * gd * inv
        return dx, dgamma, dbeta

    return _record("batch_norm", (x, gamma, beta), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (embedding) axis of token-shaped input."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.size != d:
        raise ShapeError(f"layer_norm affine size {gamma.size} != feature size {d}")
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    gd = gamma.data.reshape((1,) * (xd.ndim - 1) + (d,))
    bd = beta.data.reshape(gd.shape)
    out = Tensor(gd * xhat + bd)

    def bwd(g):
        red = tuple(range(xd.ndim - 1))
        dgamma = (g * xhat).sum(axis=red).reshape(gamma.shape)
        dbeta = g.sum(axis=red).reshape(beta.shape)
        gsum = g.sum(axis=-1, keepdims=True)
        gxsum = (g * xhat).sum(axis=-1, keepdims=True)
        dx = (gd * inv) * (g - gsum / d - xhat * gxsum / d)
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# channel split / concat / shuffle
# ---------------------------------------------------------------------------


def split_channels(x: Tensor):
    """Split (N, C, H, W) into two order-preserving halves along channels."""
    c = x.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"channel split requires even channel count, got {c}")
    half = c // 2
    first = Tensor(np.ascontiguousarray(x.data[:, :half]))
    second = Tensor(np.ascontiguousarray(x.data[:, half:]))

    def bwd_first(g):
        full = np.zeros_like(x.data)
        full[:, :half] = g
        return (full,)

    def bwd_second(g):
        full = np.zeros_like(x.data)
        full[:, half:] = g
        return (full,)

    _record("split_lo", (x,), first, bwd_first)
    _record("split_hi", (x,), second, bwd_second)
    return first, second


def concat_channels(parts) -> Tensor:
    """Concatenate tensors along the channel axis; exact inverse of split."""
    parts = list(parts)
    base = parts[0]
    for p in parts[1:]:
        if p.shape[0] != base.shape[0] or p.shape[2:] != base.shape[2:]:
            raise ShapeError(
                f"concat requires matching N/H/W extents, got {base.shape} vs {p.shape}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i] : offsets[i + 1]])
            for i in range(len(parts))
        )

    return _record("concat", tuple(parts), out, bwd)


def _shuffle_order(channels: int, groups: int) -> np.ndarray:
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Reshape-(g, C/g)-transpose channel permutation."""
    c = x.shape[1]
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"channel count {c} not divisible by shuffle groups {groups}")
    order = _shuffle_order(c, groups)
    out = Tensor(np.ascontiguousarray(x.data[:, order]))
    inverse = np.argsort(order)

    def bwd(g):
        return (np.ascontiguousarray(g[:, inverse]),)

    return _record("channel_shuffle", (x,), out, bwd)


# ---------------------------------------------------------------------------
# focused feature map (kernel function of the linear attention)
# ---------------------------------------------------------------------------


def focused_map(x: Tensor, p: float = 3.0) -> Tensor:
    """ReLU followed by the norm-preserving elementwise power, per row.

    With r = relu(x) and y = r**p the output is (|r| / |y|) * y computed
    along the last axis.  Rows that are entirely zero after the ReLU map to
    zero rows (defined 0/0 guard) and receive zero gradient.
    """
    if p < 1:
        raise UsageError(f"focusing power must be >= 1, got {p}")
    p = float(p)
    r = np.maximum(x.data, 0)
    y = r**p
    a = np.sqrt((r * r).sum(axis=-1, keepdims=True))
    b = np.sqrt((y * y).sum(axis=-1, keepdims=True))
    nonzero = b > 0
    ratio = np.where(nonzero, a / np.where(nonzero, b, 1.0), 0.0)
    out = Tensor(ratio * y)
    mask = x.data > 0

    def bwd(g):
        # d(out)/dr = ratio * p * r^(p-1) on the diagonal plus the row-coupled
        # term from the norm ratio; zero rows contribute nothing.
        gy = (g * y).sum(axis=-1, keepdims=True)
        safe_a = np.where(a > 0, a, 1.0)
        safe_b = np.where(nonzero, b, 1.0)
        diag = g * ratio * p * r ** (p - 1.0)
        coupled = gy * (
            r / (safe_a * safe_b) - (a / safe_b**3) * p * y * r ** (p - 1.0)
        )
        dr = np.where(nonzero, diag + coupled, 0.0)
        return (dr * mask,)

    return _record("focused_map", (x,), out, bwd)


# ---------------------------------------------------------------------------
# operator sugar
# ---------------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__sub__ = sub
Tensor.__mul__ = mul
Tensor.__truediv__ = div
Tensor.__matmul__ = matmul

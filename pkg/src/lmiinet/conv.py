"""Convolution, pooling, and resampling kernels.

Two convolution paths exist on purpose: :func:`conv2d` is the im2col +
grouped-matmul fast path used everywhere, and :func:`conv2d_reference` is
the direct nested-loop kernel kept as an independent oracle (it can also
count the multiply-accumulates it performs, taps into zero padding
included, so it doubles as the instrumented counter for cost checks).

Resampling (bilinear/nearest upsample, average and global pooling) is
expressed as separable per-axis linear maps so forward and backward are
plain matrix products with a fixed reduction order.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ConfigError
from .ops import _record
from .tensor import Tensor


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ShapeError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def _check_conv_args(x, w, bias, stride, padding, dilation, groups):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (N, C, H, W), got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout, Cin/groups, kh, kw), got {w.shape}")
    n, c, h, width = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1:
        raise ConfigError(f"groups must be >= 1, got {groups}")
    if c % groups != 0:
        raise ConfigError(f"input channels {c} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ConfigError(f"output channels {cout} not divisible by groups {groups}")
    if cin_g != c // groups:
        raise ShapeError(
            f"weight expects {cin_g} channels per group but input provides {c // groups}"
        )
    if bias is not None and bias.data.reshape(-1).shape[0] != cout:
        raise ShapeError(f"bias size {bias.size} != output channels {cout}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    hout = conv_output_size(h, kh, sh, ph, dh)
    wout = conv_output_size(width, kw, sw, pw, dw)
    if hout < 1 or wout < 1:
        raise ShapeError(
            f"empty conv output for input {h}x{width}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, pad {ph}x{pw}, dilation {dh}x{dw}"
        )
    return (sh, sw), (ph, pw), (dh, dw), (hout, wout)


def _im2col(x: np.ndarray, kh, kw, sh, sw, ph, pw, dh, dw, hout, wout) -> np.ndarray:
    """(N, C, H, W) -> (N, C, kh, kw, Hout, Wout) patch tensor with zero padding."""
    n, c, h, w = x.shape
    if ph or pw:
        padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        padded[:, :, ph : ph + h, pw : pw + w] = x
    else:
        padded = x
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=x.dtype)
    for i in range(kh):
        i0 = i * dh
        for j in range(kw):
            j0 = j * dw
            cols[:, :, i, j] = padded[
                :, :, i0 : i0 + sh * hout : sh, j0 : j0 + sw * wout : sw
            ]
    return cols


def _col2im(cols: np.ndarray, h, w, kh, kw, sh, sw, ph, pw, dh, dw) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back into an (N, C, H, W) map."""
    n, c = cols.shape[0], cols.shape[1]
    hout, wout = cols.shape[4], cols.shape[5]
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        i0 = i * dh
        for j in range(kw):
            j0 = j * dw
            padded[:, :, i0 : i0 + sh * hout : sh, j0 : j0 + sw * wout : sw] += cols[
                :, :, i, j
            ]
    if ph or pw:
        return padded[:, :, ph : ph + h, pw : pw + w]
    return padded


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
) -> Tensor:
    """2D cross-correlation (no kernel flip) with zero padding.

    x: (N, C, H, W); weight: (Cout, C/groups, kh, kw); optional bias (Cout,).
    Output spatial extents follow floor((S + 2p - d*(k-1) - 1)/stride) + 1.
    """
    (sh, sw), (ph, pw), (dh, dw), (hout, wout) = _check_conv_args(
        x, weight, bias, stride, padding, dilation, groups
    )
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    cout_g = cout // groups
    k = cin_g * kh * kw

    cols = _im2col(x.data, kh, kw, sh, sw, ph, pw, dh, dw, hout, wout)
    cols_g = cols.reshape(n, groups, k, hout * wout)
    w_g = weight.data.reshape(groups, cout_g, k)
    out_flat = np.matmul(w_g[None], cols_g)  # (N, groups, Cout_g, L)
    out_arr = out_flat.reshape(n, cout, hout, wout)
    if bias is not None:
        out_arr = out_arr + bias.data.reshape(1, cout, 1, 1)
    out = Tensor(out_arr)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g_flat = g.reshape(n, groups, cout_g, hout * wout)
        dw_ = np.matmul(g_flat, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        dw_ = dw_.reshape(weight.shape)
        dcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_flat)
        dcols = dcols.reshape(n, c, kh, kw, hout, wout)
        dx = _col2im(dcols, h, w, kh, kw, sh, sw, ph, pw, dh, dw)
        if bias is None:
            return dx, dw_
        db = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return dx, dw_, db

    return _record("conv2d", inputs, out, bwd)


def conv2d_reference(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
    count_macs: bool = False,
):
    """Direct nested-loop convolution over raw arrays; the testing oracle.

    With ``count_macs=True`` also returns the number of multiply-accumulate
    operations, counting every kernel tap (padding taps multiply by zero but
    still count, matching the closed-form Cout*(Cin/g)*kh*kw*Hout*Wout).
    """
    tx = Tensor(np.asarray(x, dtype=np.float64))
    tw = Tensor(np.asarray(weight, dtype=np.float64))
    (sh, sw), (ph, pw), (dh, dw), (hout, wout) = _check_conv_args(
        tx, tw, None, stride, padding, dilation, groups
    )
    x = tx.data
    weight = tw.data
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    padded[:, :, ph : ph + h, pw : pw + w] = x
    out = np.zeros((n, cout, hout, wout), dtype=x.dtype)
    macs = 0
    for b in range(n):
        for oc in range(cout):
            group = oc // (cout // groups)
            ic0 = group * cin_g
            for oy in range(hout):
                for ox in range(wout):
                    acc = 0.0
                    for ic in range(cin_g):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * sh + ky * dh
                                ix = ox * sw + kx * dw
                                acc += padded[b, ic0 + ic, iy, ix] * weight[oc, ic, ky, kx]
                                macs += 1
                    out[b, oc, oy, ox] = acc
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, cout, 1, 1)
    if count_macs:
        return out, macs
    return out


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling with non-overlapping default windows; ties break to the
    first (lowest flat index) element so backward is deterministic."""
    if stride is None:
        stride = size
    if stride != size:
        raise ShapeError("max_pool2d supports stride == window size only")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by pool size {size}")
    hout, wout = h // size, w // size
    windows = x.data.reshape(n, c, hout, size, wout, size).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, hout, wout, size * size)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dwin = dflat.reshape(n, c, hout, wout, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dwin.reshape(n, c, h, w)),)

    return _record("max_pool2d", (x,), out, bwd)


def _axis_resample(x: Tensor, wh: np.ndarray, ww: np.ndarray, op: str) -> Tensor:
    """Apply per-axis linear maps: out = wh @ x @ ww^T over the spatial axes."""
    wh = wh.astype(x.dtype, copy=False)
    ww = ww.astype(x.dtype, copy=False)
    tmp = np.einsum("oh,nchw->ncow", wh, x.data, optimize=True)
    out = Tensor(np.einsum("pw,ncow->ncop", ww, tmp, optimize=True))

    def bwd(g):
        t = np.einsum("oh,ncop->nchp", wh, g, optimize=True)
        return (np.einsum("pw,nchp->nchw", ww, t, optimize=True),)

    return _record(op, (x,), out, bwd)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by pool size {size}")

    def pool_matrix(length):
        m = np.zeros((length // size, length))
        for i in range(length // size):
            m[i, i * size : (i + 1) * size] = 1.0 / size
        return m

    return _axis_resample(x, pool_matrix(h), pool_matrix(w), "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) mean over the spatial axes."""
    n, c, h, w = x.shape
    return _axis_resample(
        x, np.full((1, h), 1.0 / h), np.full((1, w), 1.0 / w), "global_avg_pool"
    )


def _bilinear_matrix(out_len: int, in_len: int) -> np.ndarray:
    """Row-stochastic interpolation weights with half-pixel centers and
    clamped edges (align-corners disabled)."""
    m = np.zeros((out_len, in_len))
    ratio = in_len / out_len
    for o in range(out_len):
        src = (o + 0.5) * ratio - 0.5
        lo = int(np.floor(src))
        t = src - lo
        lo_c = min(max(lo, 0), in_len - 1)
        hi_c = min(max(lo + 1, 0), in_len - 1)
        m[o, lo_c] += 1.0 - t
        m[o, hi_c] += t
    return m


def _nearest_matrix(out_len: int, in_len: int) -> np.ndarray:
    m = np.zeros((out_len, in_len))
    ratio = in_len / out_len
    for o in range(out_len):
        src = min(int(o * ratio), in_len - 1)
        m[o, src] = 1.0
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
    n, c, h, w = x.shape
    return _axis_resample(
        x,
        _bilinear_matrix(h * factor, h),
        _bilinear_matrix(w * factor, w),
        "upsample_bilinear",
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
    n, c, h, w = x.shape
    return _axis_resample(
        x,
        _nearest_matrix(h * factor, h),
        _nearest_matrix(w * factor, w),
        "upsample_nearest",
    )

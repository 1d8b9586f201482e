"""Neural-network primitives on top of the autodiff tape.

Each op validates its inputs, computes the forward result with numpy,
and registers a closure that routes the output gradient back to every
input.  Convolution ships two forward paths, a direct kernel-position
loop and an im2col/GEMM path, which must agree to 1e-5; the direct path
doubles as a built-in correctness oracle for the fast one.
"""

from __future__ import annotations

import numpy as np

from .tensor import accumulate_grad, make_op


def conv_output_size(extent, kernel, stride, padding, dilation):
    """Closed-form output extent of a strided, dilated cross-correlation."""
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_conv_args(x, w, stride, padding, dilation):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d: stride and dilation must be >= 1, got {stride}, {dilation}")
    if padding < 0:
        raise ValueError(f"conv2d: negative padding {padding}")
    n, c, h, wdt = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d: weight expects {cw} input channels, input has {c}")
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    if eff_h > h + 2 * padding or eff_w > wdt + 2 * padding:
        raise ValueError(
            f"conv2d: effective kernel {eff_h}x{eff_w} exceeds padded input "
            f"{h + 2 * padding}x{wdt + 2 * padding}"
        )


def _pad_spatial(arr, padding):
    if padding == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _patch_slices(ki, kj, stride, dilation, h_out, w_out):
    si = slice(ki * dilation, ki * dilation + stride * h_out, stride)
    sj = slice(kj * dilation, kj * dilation + stride * w_out, stride)
    return si, sj


def _conv2d_forward_direct(xd, wd, stride, padding, dilation):
    n, c, h, wdt = xd.shape
    k, _, kh, kw = wd.shape
    h_out = conv_output_size(h, kh, stride, padding, dilation)
    w_out = conv_output_size(wdt, kw, stride, padding, dilation)
    xp = _pad_spatial(xd, padding)
    out = np.zeros((n, k, h_out, w_out), dtype=xd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            si, sj = _patch_slices(ki, kj, stride, dilation, h_out, w_out)
            out += np.einsum("nchw,kc->nkhw", xp[:, :, si, sj], wd[:, :, ki, kj], optimize=True)
    return out


def _conv2d_forward_im2col(xd, wd, stride, padding, dilation):
    n, c, h, wdt = xd.shape
    k, _, kh, kw = wd.shape
    h_out = conv_output_size(h, kh, stride, padding, dilation)
    w_out = conv_output_size(wdt, kw, stride, padding, dilation)
    xp = _pad_spatial(xd, padding)
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, h_out, w_out),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = view.reshape(n, c * kh * kw, h_out * w_out)
    out = np.matmul(wd.reshape(k, -1), cols)
    return out.reshape(n, k, h_out, w_out)


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, method="im2col"):
    """2-d cross-correlation with stride, zero padding, and dilation.

    Dilation > 1 spaces the kernel taps apart (atrous convolution),
    enlarging the receptive field without extra parameters.  ``method``
    selects the forward path: "im2col" (default, GEMM-backed) or
    "direct" (kernel-position loop).
    """
    _check_conv_args(x, weight, stride, padding, dilation)
    xd, wd = x.data, weight.data
    if method == "im2col":
        out_data = _conv2d_forward_im2col(xd, wd, stride, padding, dilation)
    elif method == "direct":
        out_data = _conv2d_forward_direct(xd, wd, stride, padding, dilation)
    else:
        raise ValueError(f"conv2d: unknown method {method!r}")

    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")
        out_data = out_data + bias.data[None, :, None, None]

    n, c, h, wdt = xd.shape
    k, _, kh, kw = wd.shape
    h_out, w_out = out_data.shape[2], out_data.shape[3]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        xp = _pad_spatial(xd, padding)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for ki in range(kh):
            for kj in range(kw):
                si, sj = _patch_slices(ki, kj, stride, dilation, h_out, w_out)
                patch = xp[:, :, si, sj]
                gw[:, :, ki, kj] = np.einsum("nkhw,nchw->kc", g, patch, optimize=True)
                gxp[:, :, si, sj] += np.einsum(
                    "nkhw,kc->nchw", g, wd[:, :, ki, kj], optimize=True
                )
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        accumulate_grad(x, gx)
        accumulate_grad(weight, gw)
        if bias is not None:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))

    return make_op(out_data, inputs, bwd)


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place as
    ``running = (1 - momentum) * running + momentum * batch``.
    Eval mode normalizes with the running buffers.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if eps <= 0:
        raise ValueError(f"batch_norm2d: eps must be positive, got {eps}")
    m = n * h * w
    if m == 0:
        raise ValueError("batch_norm2d: zero-element channel")

    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out_data = out_data.astype(xd.dtype)

    def bwd(g):
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            sum_gxhat = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat - sum_gxhat - xhat * sum_gxhat_xhat
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        accumulate_grad(x, gx.astype(xd.dtype))

    return make_op(out_data, (x, gamma, beta), bwd)


def max_pool2d(x, kernel, stride=None):
    """Windowed maximum; gradient flows to the first (row-major) argmax."""
    if kernel < 1:
        raise ValueError(f"max_pool2d: kernel must be >= 1, got {kernel}")
    stride = kernel if stride is None else stride
    if stride < 1:
        raise ValueError(f"max_pool2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"max_pool2d: kernel {kernel} larger than input {h}x{w}")
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1

    xd = x.data
    s0, s1, s2, s3 = xd.strides
    view = np.lib.stride_tricks.as_strided(
        xd,
        shape=(n, c, h_out, w_out, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    flat = view.reshape(n, c, h_out, w_out, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(xd)
        ni, ci, oi, oj = np.indices(arg.shape, sparse=False)
        ii = oi * stride + arg // kernel
        jj = oj * stride + arg % kernel
        np.add.at(gx, (ni, ci, ii, jj), g)
        accumulate_grad(x, gx)

    return make_op(out_data, (x,), bwd)


def _interp_matrix(in_size, out_size, dtype):
    """Row-stochastic 1-d linear-interpolation matrix (align-corners off)."""
    mat = np.zeros((out_size, in_size), dtype=dtype)
    coords = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    i0 = np.clip(np.floor(coords).astype(int), 0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = np.clip(coords - i0, 0.0, 1.0)
    rows = np.arange(out_size)
    np.add.at(mat, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, i1), frac.astype(dtype))
    return mat


def _apply_axis_matrix(arr, mat, axis):
    moved = np.tensordot(mat, arr, axes=([1], [axis]))
    return np.moveaxis(moved, 0, axis)


def upsample2d(x, scale, mode="nearest"):
    """Integer spatial upsampling, nearest replication or bilinear."""
    if scale < 1:
        raise ValueError(f"upsample2d: scale must be >= 1, got {scale}")
    if x.ndim != 4:
        raise ValueError(f"upsample2d expects NCHW input, got {x.shape}")
    if scale == 1:
        return x
    n, c, h, w = x.shape
    xd = x.data

    if mode == "nearest":
        out_data = xd.repeat(scale, axis=2).repeat(scale, axis=3)

        def bwd(g):
            gx = g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5))
            accumulate_grad(x, gx)

        return make_op(out_data, (x,), bwd)

    if mode == "bilinear":
        mh = _interp_matrix(h, h * scale, xd.dtype)
        mw = _interp_matrix(w, w * scale, xd.dtype)
        out_data = _apply_axis_matrix(_apply_axis_matrix(xd, mh, 2), mw, 3)

        def bwd(g):
            gx = _apply_axis_matrix(_apply_axis_matrix(g, mh.T, 2), mw.T, 3)
            accumulate_grad(x, gx)

        return make_op(out_data, (x,), bwd)

    raise ValueError(f"upsample2d: unknown mode {mode!r}")


def leaky_relu(x, slope=0.01):
    """x for x >= 0, slope * x otherwise; gradient at 0 follows the x >= 0 arm."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in [0, 1), got {slope}")
    xd = x.data
    factor = np.where(xd >= 0, xd.dtype.type(1.0), xd.dtype.type(slope))
    out_data = xd * factor

    def bwd(g):
        accumulate_grad(x, g * factor)

    return make_op(out_data, (x,), bwd)


def relu(x):
    """max(0, x); gradient at exactly 0 is 0."""
    xd = x.data
    mask = xd > 0
    out_data = np.where(mask, xd, xd.dtype.type(0.0))

    def bwd(g):
        accumulate_grad(x, g * mask)

    return make_op(out_data, (x,), bwd)


def stable_sigmoid(arr):
    """1 / (1 + exp(-x)) computed without overflow for large |x|."""
    e = np.exp(-np.abs(arr))
    return np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    """Numerically stable logistic function."""
    s = stable_sigmoid(x.data).astype(x.data.dtype)

    def bwd(g):
        accumulate_grad(x, g * s * (1.0 - s))

    return make_op(s, (x,), bwd)


def dropout(x, rate, training, rng=None):
    """Inverted dropout: zero with probability ``rate``, rescale survivors.

    Identity in eval mode or at rate 0.  ``rng`` (a numpy Generator) is
    required when a mask is actually drawn, keeping runs reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: rng required in training mode")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    out_data = x.data * keep * scale

    def bwd(g):
        accumulate_grad(x, g * keep * scale)

    return make_op(out_data, (x,), bwd)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) mean over all spatial positions."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype)
        accumulate_grad(x, gx)

    return make_op(out_data, (x,), bwd)


def linear(x, weight, bias=None):
    """Affine map (N, Cin) @ weight.T + bias, weight shaped (Cout, Cin)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: inner dims differ, {x.shape[1]} vs {weight.shape[1]}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out_data = out_data + bias.data[None, :]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        accumulate_grad(x, g @ weight.data)
        accumulate_grad(weight, g.T @ x.data)
        if bias is not None:
            accumulate_grad(bias, g.sum(axis=0))

    return make_op(out_data, inputs, bwd)


def scale_channels(x, gate):
    """Multiply each channel of (N, C, H, W) by a per-sample gate (N, C)."""
    if x.ndim != 4 or gate.ndim != 2 or x.shape[:2] != gate.shape:
        raise ValueError(f"scale_channels: shapes {x.shape} and {gate.shape} do not match")
    gd = gate.data[:, :, None, None]
    out_data = x.data * gd

    def bwd(g):
        accumulate_grad(x, g * gd)
        accumulate_grad(gate, (g * x.data).sum(axis=(2, 3)))

    return make_op(out_data, (x, gate), bwd)


def concat_channels(tensors):
    """Stack (N, Ci, H, W) tensors along the channel axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels: empty input list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            accumulate_grad(t, g[:, lo:hi])

    return make_op(out_data, tuple(tensors), bwd)


def _reflect_matrix(size, before, after, dtype):
    """0/1 matrix mapping a length-``size`` axis to its reflect-padded version."""
    if before >= size or after >= size:
        raise ValueError(f"reflect pad ({before}, {after}) too large for extent {size}")
    idx = np.concatenate(
        [np.arange(before, 0, -1), np.arange(size), np.arange(size - 2, size - 2 - after, -1)]
    )
    mat = np.zeros((size + before + after, size), dtype=dtype)
    mat[np.arange(len(idx)), idx] = 1.0
    return mat


def reflect_pad2d(x, pads):
    """Reflection-pad the two spatial axes; pads = (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if x.ndim != 4:
        raise ValueError(f"reflect_pad2d expects NCHW input, got {x.shape}")
    if top == bottom == left == right == 0:
        return x
    n, c, h, w = x.shape
    mh = _reflect_matrix(h, top, bottom, x.data.dtype)
    mw = _reflect_matrix(w, left, right, x.data.dtype)
    out_data = _apply_axis_matrix(_apply_axis_matrix(x.data, mh, 2), mw, 3)

    def bwd(g):
        gx = _apply_axis_matrix(_apply_axis_matrix(g, mh.T, 2), mw.T, 3)
        accumulate_grad(x, gx)

    return make_op(out_data, (x,), bwd)


def crop2d(x, top, left, height, width):
    """Slice a spatial window out of an NCHW tensor."""
    n, c, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError(f"crop2d: window ({top},{left},{height},{width}) outside {h}x{w}")
    out_data = x.data[:, :, top : top + height, left : left + width].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, top : top + height, left : left + width] = g
        accumulate_grad(x, gx)

    return make_op(out_data, (x,), bwd)

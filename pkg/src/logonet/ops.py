"""Differentiable operations over `Tensor`.

Each function computes the forward value with numpy and attaches a
backward rule that maps the output gradient to input gradients.  The
op set is exactly what the embedding network and its training loop
need; convolution flattens patches into one GEMM per call and feeds
the gradients through GEMMs as well (the stride-1 input gradient is a
correlation with the flipped kernel, so no scatter loop runs on the
hot path).
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, make_output, unbroadcast

Scalar = Union[int, float]


def _as_windows(x: np.ndarray, k: int, stride: int):
    """View [N,C,H,W] as [N,Ho,Wo,C,k,k] windows without copying."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(x, (n, ho, wo, c, k, k),
                      (sn, sh * stride, sw * stride, sc, sh, sw))
    return view, ho, wo


def _im2col_nhwc(x: np.ndarray, k: int, stride: int, padding: int):
    """Flatten conv windows of a padded [N,H,W,C] array into a matrix.

    Returns (cols [N*Ho*Wo, k*k*C], Ho, Wo).  Column order matches a
    [C_out, k, k, C_in] kernel flattened in row-major order; channels
    sit innermost so each window row is gathered in contiguous runs.
    """
    n, h, w, c = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding > 0:
        xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
    else:
        xp = np.ascontiguousarray(x)
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, (n, ho, wo, k, k, c),
                      (sn, sh * stride, sw * stride, sh, sw, sc))
    return view.reshape(n * ho * wo, k * k * c), ho, wo


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Channels-first wrapper over `_im2col_nhwc`; same column order."""
    return _im2col_nhwc(x.transpose(0, 2, 3, 1), k, stride, padding)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {weight.shape}")
    k = kh
    if wc_in != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has C_in={c_in}, "
            f"weight {weight.shape} expects C_in={wc_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(
            f"conv2d kernel {k} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")

    # [C_out, k, k, C_in] flattening matches the channels-innermost cols
    w_mat = np.ascontiguousarray(
        weight.data.transpose(0, 2, 3, 1)).reshape(c_out, k * k * c_in)
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    out = cols @ w_mat.T
    out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    # the patch matrix is kept for the weight gradient; recomputing it
    # costs more wall time than the memory is worth at these sizes
    keep_cols = cols if weight.requires_grad else None

    def backward_fn(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if weight.requires_grad:
            gw = (g2.T @ keep_cols).reshape(c_out, k, k, c_in).transpose(
                0, 3, 1, 2)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            if stride == 1:
                # transposed conv: correlate the (k-1)-padded output grad
                # with the flipped kernel; one GEMM, no scatter loop
                wflip = np.ascontiguousarray(
                    weight.data.transpose(1, 2, 3, 0)[:, ::-1, ::-1, :])
                gcols, gh, gwid = _im2col(g, k, 1, k - 1)
                full = gcols @ wflip.reshape(c_in, k * k * c_out).T
                full = full.reshape(n, gh, gwid, c_in).transpose(0, 3, 1, 2)
                gx = np.ascontiguousarray(
                    full[:, :, padding:padding + h, padding:padding + w])
            else:
                gcols = g2 @ w_mat
                gct = np.ascontiguousarray(
                    gcols.reshape(n, ho, wo, k, k, c_in)
                    .transpose(3, 4, 0, 5, 1, 2))
                hp, wp = h + 2 * padding, w + 2 * padding
                gpad = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
                for ki in range(k):
                    for kj in range(k):
                        gpad[:, :, ki:ki + stride * ho:stride,
                             kj:kj + stride * wo:stride] += gct[ki, kj]
                gx = gpad[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    return make_output(np.ascontiguousarray(out), "conv2d", (x, weight, bias),
                       backward_fn)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window-wise maxima; gradient goes to the first (lowest flat index) max."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d window {k} exceeds input {h}x{w}")
    if k == 2 and stride == 2:
        return _maxpool_2x2(x)
    view, ho, wo = _as_windows(x.data, k, stride)
    # windows as [N,C,Ho,Wo,k*k]; argmax picks the first max in flat order
    win = np.ascontiguousarray(view.transpose(0, 3, 1, 2, 4, 5)).reshape(
        n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        ki, kj = idx // k, idx % k
        ni, ci, ohi, owi = np.indices((n, c, ho, wo), sparse=False)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci, ohi * stride + ki, owi * stride + kj), g)
        return (gx,)

    return make_output(out, "maxpool2d", (x,), backward_fn)


def _maxpool_2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 pooling on strided views; same first-max tie rule."""
    n, c, h, w = x.shape
    ho, wo = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    hl, wl = 2 * ho, 2 * wo
    quads = (x.data[:, :, 0:hl:2, 0:wl:2], x.data[:, :, 0:hl:2, 1:wl:2],
             x.data[:, :, 1:hl:2, 0:wl:2], x.data[:, :, 1:hl:2, 1:wl:2])
    out = np.maximum(np.maximum(quads[0], quads[1]),
                     np.maximum(quads[2], quads[3]))

    def backward_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        slices = ((slice(0, hl, 2), slice(0, wl, 2)),
                  (slice(0, hl, 2), slice(1, wl, 2)),
                  (slice(1, hl, 2), slice(0, wl, 2)),
                  (slice(1, hl, 2), slice(1, wl, 2)))
        taken = np.zeros(out.shape, dtype=bool)
        for quad, (si, sj) in zip(quads, slices):
            hit = (quad == out) & ~taken
            gx[:, :, si, sj] += np.where(hit, g, 0.0)
            taken |= hit
        return (gx,)

    return make_output(out, "maxpool2d", (x,), backward_fn)


# ---------------------------------------------------------------------------
# Channels-last twins. The embedding pipeline runs [N,H,W,C] end to end so
# conv GEMM operands and their gradients are already in patch order and no
# per-layer layout transposes happen; values match the channels-first ops
# (the small reductions transpose first so summation order is shared, and
# tie rules are identical).


def to_channels_last(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,H,W,C]; pure data movement."""
    if x.data.ndim != 4:
        raise ValueError(f"to_channels_last expects 4-d input, got {x.shape}")
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))

    def backward_fn(g: np.ndarray):
        return (g.transpose(0, 3, 1, 2),)

    return make_output(out, "to_channels_last", (x,), backward_fn)


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor,
                padding: int = 0) -> Tensor:
    """Stride-1 convolution over [N,H,W,C]; weight stays [C_out,C_in,k,k]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d_nhwc expects 4-d input and weight, got {x.shape} "
            f"and {weight.shape}")
    n, h, w, c_in = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d_nhwc kernel must be square, got {weight.shape}")
    k = kh
    if wc_in != c_in:
        raise ValueError(
            f"conv2d_nhwc channel mismatch: input {x.shape} has C_in={c_in}, "
            f"weight {weight.shape} expects C_in={wc_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d_nhwc bias shape {bias.shape} != ({c_out},)")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(
            f"conv2d_nhwc kernel {k} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    w_mat = np.ascontiguousarray(
        weight.data.transpose(0, 2, 3, 1)).reshape(c_out, k * k * c_in)
    cols, ho, wo = _im2col_nhwc(x.data, k, 1, padding)
    out = cols @ w_mat.T
    out += bias.data
    out = out.reshape(n, ho, wo, c_out)
    keep_cols = cols if weight.requires_grad else None

    def backward_fn(g: np.ndarray):
        g2 = g.reshape(-1, c_out)
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if weight.requires_grad:
            gw = (g2.T @ keep_cols).reshape(c_out, k, k, c_in).transpose(
                0, 3, 1, 2)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            wflip = np.ascontiguousarray(
                weight.data.transpose(1, 2, 3, 0)[:, ::-1, ::-1, :])
            gcols, gh, gwid = _im2col_nhwc(g, k, 1, k - 1)
            full = gcols @ wflip.reshape(c_in, k * k * c_out).T
            full = full.reshape(n, gh, gwid, c_in)
            gx = np.ascontiguousarray(
                full[:, padding:padding + h, padding:padding + w])
        return gx, gw, gb

    return make_output(out, "conv2d_nhwc", (x, weight, bias), backward_fn)


def maxpool2d_nhwc(x: Tensor, k: int, stride: int) -> Tensor:
    """2x2 stride-2 pooling over [N,H,W,C]; same first-max tie rule."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d_nhwc expects 4-d input, got {x.shape}")
    if k != 2 or stride != 2:
        raise ValueError(
            f"maxpool2d_nhwc supports only 2x2 stride 2, got k={k} "
            f"stride={stride}")
    n, h, w, c = x.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d_nhwc window {k} exceeds input {h}x{w}")
    ho, wo = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    hl, wl = 2 * ho, 2 * wo
    quads = (x.data[:, 0:hl:2, 0:wl:2], x.data[:, 0:hl:2, 1:wl:2],
             x.data[:, 1:hl:2, 0:wl:2], x.data[:, 1:hl:2, 1:wl:2])
    out = np.maximum(np.maximum(quads[0], quads[1]),
                     np.maximum(quads[2], quads[3]))

    def backward_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        slices = ((slice(0, hl, 2), slice(0, wl, 2)),
                  (slice(0, hl, 2), slice(1, wl, 2)),
                  (slice(1, hl, 2), slice(0, wl, 2)),
                  (slice(1, hl, 2), slice(1, wl, 2)))
        taken = np.zeros(out.shape, dtype=bool)
        for quad, (si, sj) in zip(quads, slices):
            hit = (quad == out) & ~taken
            gx[:, si, sj] += np.where(hit, g, 0.0)
            taken |= hit
        return (gx,)

    return make_output(out, "maxpool2d_nhwc", (x,), backward_fn)


def global_avgpool_nhwc(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,H,W,C] -> [N,1,1,C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avgpool_nhwc expects 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    # transpose the (small) pooled map so the sum runs in the same order
    # as the channels-first op; the two layouts then agree bitwise
    out = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)).mean(
        axis=(2, 3)).reshape(n, 1, 1, c)

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_output(out, "global_avgpool_nhwc", (x,), backward_fn)


def global_maxpool_nhwc(x: Tensor) -> Tensor:
    """Per-channel spatial max: [N,H,W,C] -> [N,1,1,C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_maxpool_nhwc expects 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    flat = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)).reshape(n, c, -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, 1, 1, c)

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        hi, wi = idx // w, idx % w
        ni = np.arange(n)[:, None]
        ci = np.arange(c)[None, :]
        gx[ni, hi, wi, ci] = g[:, 0, 0, :]
        return (gx,)

    return make_output(out, "global_maxpool_nhwc", (x,), backward_fn)


def channel_meanpool_nhwc(x: Tensor) -> Tensor:
    """Per-position channel mean: [N,H,W,C] -> [N,H,W,1]."""
    if x.data.ndim != 4:
        raise ValueError(f"channel_meanpool_nhwc expects 4-d input, got {x.shape}")
    c = x.shape[3]
    out = x.data.mean(axis=3, keepdims=True)

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / c, x.shape).copy(),)

    return make_output(out, "channel_meanpool_nhwc", (x,), backward_fn)


def channel_maxpool_nhwc(x: Tensor) -> Tensor:
    """Per-position channel max: [N,H,W,C] -> [N,H,W,1]; ties to lowest channel."""
    if x.data.ndim != 4:
        raise ValueError(f"channel_maxpool_nhwc expects 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    idx = x.data.argmax(axis=3)
    out = np.take_along_axis(x.data, idx[..., None], axis=3)

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        ni, hi, wi = np.indices((n, h, w), sparse=False)
        gx[ni, hi, wi, idx] = g[..., 0]
        return (gx,)

    return make_output(out, "channel_maxpool_nhwc", (x,), backward_fn)


def concat_channels_nhwc(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the trailing channel axis (axis 3)."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError(
            f"concat_channels_nhwc: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:3] != b.shape[:3]:
        raise ValueError(
            f"concat_channels_nhwc: non-channel dims differ, "
            f"{a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=3)
    ca = a.shape[3]

    def backward_fn(g: np.ndarray):
        return g[..., :ca].copy(), g[..., ca:].copy()

    return make_output(out, "concat_channels_nhwc", (a, b), backward_fn)


def global_avgpool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C,1,1]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avgpool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_output(out, "global_avgpool", (x,), backward_fn)


def global_maxpool(x: Tensor) -> Tensor:
    """Per-channel spatial max: [N,C,H,W] -> [N,C,1,1]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_maxpool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

    def backward_fn(g: np.ndarray):
        gf = np.zeros((n, c, h * w), dtype=g.dtype)
        gf[np.arange(n)[:, None], np.arange(c)[None, :], idx] = g[:, :, 0, 0]
        return (gf.reshape(x.shape),)

    return make_output(out, "global_maxpool", (x,), backward_fn)


def channel_meanpool(x: Tensor) -> Tensor:
    """Per-position channel mean: [N,C,H,W] -> [N,1,H,W]."""
    if x.data.ndim != 4:
        raise ValueError(f"channel_meanpool expects 4-d input, got {x.shape}")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / c, x.shape).copy(),)

    return make_output(out, "channel_meanpool", (x,), backward_fn)


def channel_maxpool(x: Tensor) -> Tensor:
    """Per-position channel max: [N,C,H,W] -> [N,1,H,W]; ties to lowest channel."""
    if x.data.ndim != 4:
        raise ValueError(f"channel_maxpool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    idx = x.data.argmax(axis=1)
    out = np.take_along_axis(x.data, idx[:, None], axis=1)

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        ni, hi, wi = np.indices((n, h, w), sparse=False)
        gx[ni, idx, hi, wi] = g[:, 0]
        return (gx,)

    return make_output(out, "channel_maxpool", (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray):
        return (g * (x.data > 0),)

    return make_output(out, "relu", (x,), backward_fn)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)

    def backward_fn(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return make_output(s, "sigmoid", (x,), backward_fn)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + float(b)

        def backward_scalar(g: np.ndarray):
            return (g,)

        return make_output(out, "add", (a,), backward_scalar)

    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible broadcast {a.shape} vs {b.shape}")

    def backward_fn(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_output(out, "add", (a, b), backward_fn)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data - float(b)

        def backward_scalar(g: np.ndarray):
            return (g,)

        return make_output(out, "sub", (a,), backward_scalar)

    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: incompatible broadcast {a.shape} vs {b.shape}")

    def backward_fn(g: np.ndarray):
        return unbroadcast(g, a.shape), -unbroadcast(g, b.shape)

    return make_output(out, "sub", (a, b), backward_fn)


def mul_broadcast(feature: Tensor, mask: Tensor) -> Tensor:
    """Elementwise product of a feature map with an attention mask.

    Every mask dimension must equal the feature dimension or 1, so the
    output shape always equals the feature shape.
    """
    if mask.data.ndim != feature.data.ndim or any(
            m != f and m != 1 for m, f in zip(mask.shape, feature.shape)):
        raise ValueError(
            f"mul_broadcast: mask shape {mask.shape} does not broadcast "
            f"to feature shape {feature.shape}")
    out = feature.data * mask.data

    def backward_fn(g: np.ndarray):
        gf = g * mask.data
        gm = unbroadcast(g * feature.data, mask.shape)
        return gf, gm

    return make_output(out, "mul_broadcast", (feature, mask), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1)."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ValueError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward_fn(g: np.ndarray):
        return g[:, :ca].copy(), g[:, ca:].copy()

    return make_output(out, "concat_channels", (a, b), backward_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along axis 0; partners with slice_rows to batch parallel branches."""
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    first = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != first:
            raise ValueError(
                f"concat_rows: trailing dims differ, {p.shape} vs "
                f"{parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=0)
    counts = [p.shape[0] for p in parts]

    def backward_fn(g: np.ndarray):
        grads, at = [], 0
        for p, cnt in zip(parts, counts):
            grads.append(g[at:at + cnt].copy() if p.requires_grad else None)
            at += cnt
        return tuple(grads)

    return make_output(out, "concat_rows", tuple(parts), backward_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop); gradient scatters back into a zero block."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ValueError(
            f"slice_rows: [{start}, {stop}) out of range for {x.shape}")
    out = x.data[start:stop].copy()

    def backward_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return make_output(out, "slice_rows", (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N,D_in] @ [D_out,D_in]^T + [D_out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} "
                         f"and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_output(out, "linear", (x, weight, bias), backward_fn)


_DIST_EPS = 1e-12  # under the root: clamps the sqrt singularity at zero distance


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance of [N,D] pairs -> [N]."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ValueError(
            f"euclidean_distance: expected matching [N,D] shapes, "
            f"got {a.shape} and {b.shape}")
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=1) + _DIST_EPS)

    def backward_fn(g: np.ndarray):
        scale = (g / dist)[:, None]
        ga = scale * diff
        return ga, -ga

    return make_output(dist, "euclidean_distance", (a, b), backward_fn)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of [N,D] to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ValueError(f"l2_normalize expects [N,D], got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + _DIST_EPS)
    y = x.data / norm

    def backward_fn(g: np.ndarray):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norm,)

    return make_output(y, "l2_normalize", (x,), backward_fn)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def backward_fn(g: np.ndarray):
        return (g.reshape(x.shape),)

    return make_output(out.copy(), "reshape", (x,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    out = x.data.sum()

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_output(np.asarray(out), "sum", (x,), backward_fn)


def tensor_mean(x: Tensor) -> Tensor:
    out = x.data.mean()
    size = x.size

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / size, x.shape).copy(),)

    return make_output(np.asarray(out), "mean", (x,), backward_fn)

"""Differentiable operations over :class:`nve.tensor.Tensor`.

Every function returns a new Tensor wired into the graph via
``tensor.from_op``. Layout conventions: images are (N, C, H, W), feature
matrices are (N, D). All forward code is plain numpy; conv/pool use
``sliding_window_view`` plus tensordot/einsum contractions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor import Tensor, from_op


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return from_op(a.data + b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return from_op(np.where(mask, x.data, 0), (x,), backward)


def tensor_sum(x):
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def weighted_sum(x, weights):
    """sum(x * weights) for a constant ndarray of weights; scalar output."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {x.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(w * float(g))

    return from_op(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), backward)


def linear(x, weight, bias):
    """out[n, k] = sum_d x[n, d] * weight[k, d] + bias[k]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"linear: expected 2-D input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}"
        )

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return from_op(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


def concat(tensors, axis):
    """Concatenate along ``axis``; all other dims must agree."""
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    for i, t in enumerate(tensors):
        ok = len(t.shape) == len(ref) and all(
            t.shape[d] == ref[d] for d in range(len(ref)) if d != axis
        )
        if not ok:
            raise ShapeError(
                f"concat: input {i} has shape {t.shape}, incompatible with "
                f"{ref} off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(index)])

    return from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def slice_channels(x, lo, hi):
    """x[:, lo:hi] on an (N, C, H, W) tensor; backward zero-pads the rest."""
    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            x.accumulate_grad(full)

    return from_op(x.data[:, lo:hi], (x,), backward)


def channel_shuffle(x, groups):
    """Inter-group channel permutation (reshape-transpose); pure reindexing.

    Output channel q*groups + r comes from input channel r*(C/groups) + q.
    """
    channels = x.shape[1]
    if groups < 1 or channels % groups != 0:
        raise ConfigError(
            f"channel_shuffle: groups={groups} does not divide channels={channels}"
        )
    per_group = channels // groups
    perm = (
        np.arange(channels).reshape(groups, per_group).T.reshape(-1)
    )
    inverse = np.argsort(perm)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g[:, inverse])

    return from_op(x.data[:, perm], (x,), backward)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                np.broadcast_to(g[:, :, None, None] * x.dtype.type(scale), x.shape)
            )

    return from_op(x.data.mean(axis=(2, 3)), (x,), backward)


def _conv_windows(data, k_h, k_w, stride, padding):
    if padding:
        data = np.pad(
            data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
        )
    win = sliding_window_view(data, (k_h, k_w), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D cross-correlation of (N,C,H,W) with (F,C,kH,kW) filters."""
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    f, wc, k_h, k_w = weight.shape
    if wc != c:
        raise ShapeError(
            f"conv2d: weight expects {wc} input channels (shape {weight.shape}) "
            f"but input has {c} (shape {x.shape})"
        )
    if k_h > h + 2 * padding or k_w > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k_h}x{k_w} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )

    win = _conv_windows(x.data, k_h, k_w, stride, padding)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias.data[None, :, None, None]

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            weight.accumulate_grad(dw)
        if x.requires_grad:
            x.accumulate_grad(
                _conv_input_grad(g, weight.data, (h, w), stride, padding)
            )

    return from_op(out, (x, weight, bias), backward)


def _dilate(g, stride):
    if stride == 1:
        return g
    n, f, gh, gw = g.shape
    out = np.zeros((n, f, (gh - 1) * stride + 1, (gw - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _conv_input_grad(g, weight, spatial, stride, padding):
    # Transposed convolution: dilate the output grad, full-correlate with the
    # flipped kernel, then trim the forward padding.
    h, w = spatial
    f, c, k_h, k_w = weight.shape
    gd = _dilate(g, stride)
    gd = np.pad(gd, ((0, 0), (0, 0), (k_h - 1, k_h - 1), (k_w - 1, k_w - 1)))
    win = sliding_window_view(gd, (k_h, k_w), axis=(2, 3))
    flipped = weight[:, :, ::-1, ::-1]
    dxp = np.tensordot(win, flipped, axes=([1, 4, 5], [0, 2, 3]))
    dxp = dxp.transpose(0, 3, 1, 2)
    # Rows/cols past the last window position receive no gradient.
    target_h, target_w = h + 2 * padding, w + 2 * padding
    pad_h, pad_w = target_h - dxp.shape[2], target_w - dxp.shape[3]
    if pad_h or pad_w:
        dxp = np.pad(dxp, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    return dxp[:, :, padding : padding + h, padding : padding + w]


def depthwise_conv2d(x, weight, bias, stride=1, padding=0):
    """Per-channel conv: one (kH, kW) filter per input channel.

    weight has shape (C, kH, kW); output keeps C channels.
    """
    if stride < 1:
        raise ConfigError(f"depthwise_conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    wc, k_h, k_w = weight.shape
    if wc != c:
        raise ShapeError(
            f"depthwise_conv2d: weight for {wc} channels but input has {c}"
        )
    if k_h > h + 2 * padding or k_w > w + 2 * padding:
        raise ShapeError(
            f"depthwise_conv2d: kernel {k_h}x{k_w} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )

    win = _conv_windows(x.data, k_h, k_w, stride, padding)
    out = np.einsum("nchwij,cij->nchw", win, weight.data)
    out += bias.data[None, :, None, None]

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight.accumulate_grad(np.einsum("nchw,nchwij->cij", g, win))
        if x.requires_grad:
            gd = _dilate(g, stride)
            gd = np.pad(
                gd, ((0, 0), (0, 0), (k_h - 1, k_h - 1), (k_w - 1, k_w - 1))
            )
            gwin = sliding_window_view(gd, (k_h, k_w), axis=(2, 3))
            dxp = np.einsum("nchwij,cij->nchw", gwin, weight.data[:, ::-1, ::-1])
            target_h, target_w = h + 2 * padding, w + 2 * padding
            pad_h, pad_w = target_h - dxp.shape[2], target_w - dxp.shape[3]
            if pad_h or pad_w:
                dxp = np.pad(dxp, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
            x.accumulate_grad(dxp[:, :, padding : padding + h, padding : padding + w])

    return from_op(out, (x, weight, bias), backward)


def pool2d(x, kind, window, stride=None):
    """Max or average pooling; max backward routes to the first argmax."""
    if kind not in ("max", "avg"):
        raise ConfigError(f"pool2d: unknown kind '{kind}'")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool2d: window {window} larger than input {h}x{w}")

    win = _conv_windows(x.data, window, window, stride, 0)
    out_h, out_w = win.shape[2], win.shape[3]

    if kind == "max":
        flat = win.reshape(n, c, out_h, out_w, window * window)
        # argmax picks the first occurrence in row-major window order (tie rule)
        idx = flat.argmax(axis=4)
        out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

        def backward(g):
            if not x.requires_grad:
                return
            dx = np.zeros_like(x.data)
            ni, ci, yi, xi = np.indices(idx.shape, sparse=True)
            rows = yi * stride + idx // window
            cols = xi * stride + idx % window
            np.add.at(dx, (ni, ci, rows, cols), g)
            x.accumulate_grad(dx)

    else:
        out = win.mean(axis=(4, 5))
        inv = 1.0 / (window * window)

        def backward(g):
            if not x.requires_grad:
                return
            dx = np.zeros_like(x.data)
            gs = g * x.dtype.type(inv)
            for i in range(window):
                for j in range(window):
                    dx[
                        :,
                        :,
                        i : i + out_h * stride : stride,
                        j : j + out_w * stride : stride,
                    ] += gs
            x.accumulate_grad(dx)

    return from_op(np.ascontiguousarray(out), (x,), backward)


def batchnorm2d(
    x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5
):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by (biased) batch statistics and updates the
    running buffers in place by exponential moving average; eval mode uses
    the running buffers. The epsilon keeps zero-variance channels finite.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta shape {gamma.shape}/{beta.shape} != ({c},)"
        )
    dt = x.dtype.type
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + dt(eps))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                g_mean = g.mean(axis=(0, 2, 3))[None, :, None, None]
                gx_mean = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                x.accumulate_grad(scale * (g - g_mean - xhat * gx_mean))
            else:
                x.accumulate_grad(scale * g)

    return from_op(out, (x, gamma, beta), backward)


def log_softmax(logits):
    """Row-wise log softmax of a plain ndarray, log-sum-exp stabilized."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, targets):
    """Mean of -log softmax(logits)[target] over the batch.

    ``targets`` is an integer array of class indices, length N.
    """
    t = np.asarray(targets)
    n, k = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= k):
        bad = int(np.argmax((t < 0) | (t >= k)))
        raise IndexError(
            f"cross_entropy: target {int(t[bad])} at position {bad} out of "
            f"range for {k} classes"
        )
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), t].mean()

    def backward(g):
        if logits.requires_grad:
            d = np.exp(logp)
            d[np.arange(n), t] -= 1.0
            logits.accumulate_grad(d * (float(g) / n))

    return from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)

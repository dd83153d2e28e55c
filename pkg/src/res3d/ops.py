"""Forward/backward numeric kernels for the 3D network layers.

Tensors are plain numpy arrays. 5-D activations are laid out as
(batch, channels, frames, height, width). Every forward function returns
``(out, cache)``; the matching backward consumes that cache. Kernels
follow the dtype of their inputs, so float64 arrays give float64 math
(used for gradient checking) and float32 arrays give float32 math.
"""

from __future__ import annotations

import itertools

import numpy as np

from res3d.errors import ConfigurationError, DimensionError, StatisticsError


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigurationError(f"expected 3 values, got {v}")
    return v


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _window_slices(offsets, out_dims, strides):
    return tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(offsets, out_dims, strides)
    )


def _pad5(x, padding, value=0.0):
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(
        x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=value
    )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv3d_forward(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 3D cross-correlation.

    ``weight`` has shape (out_ch, in_ch // groups, kT, kH, kW). The input is
    unfolded into a column matrix (im2col) and multiplied against the
    flattened filters, one GEMM per group.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects a 5-D input, got shape {x.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"conv3d weight must be 5-D, got shape {weight.shape}")
    B, C, T, H, W = x.shape
    cout, cg = weight.shape[:2]
    ksize = weight.shape[2:]
    if groups < 1 or C % groups or cout % groups:
        raise ConfigurationError(
            f"channels ({C} in, {cout} out) not divisible by groups={groups}"
        )
    if cg * groups != C:
        raise DimensionError(
            f"input has {C} channels but weight expects {cg * groups} ({cg} x {groups} groups)"
        )
    if min(stride) < 1 or min(padding) < 0 or min(ksize) < 1:
        raise ConfigurationError(f"invalid stride {stride} / padding {padding} / kernel {ksize}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
    out_dims = tuple(
        conv_output_size(n, k, s, p) for n, k, s, p in zip((T, H, W), ksize, stride, padding)
    )
    if min(out_dims) < 1:
        raise ConfigurationError(
            f"conv3d output extent {out_dims} is non-positive for input {(T, H, W)}, "
            f"kernel {ksize}, stride {stride}, padding {padding}"
        )
    N = out_dims[0] * out_dims[1] * out_dims[2]
    K = ksize[0] * ksize[1] * ksize[2]

    if K == 1 and not any(padding):
        xs = x[(slice(None), slice(None)) + _window_slices((0, 0, 0), out_dims, stride)]
        col = np.ascontiguousarray(xs).reshape(B, C, N)
    else:
        xp = _pad5(x, padding)
        col = np.empty((B, C, K) + out_dims, dtype=x.dtype)
        for i, off in enumerate(itertools.product(*(range(k) for k in ksize))):
            col[:, :, i] = xp[(slice(None), slice(None)) + _window_slices(off, out_dims, stride)]
        col = col.reshape(B, C * K, N)

    if groups == 1:
        out = np.matmul(weight.reshape(cout, C * K), col)
    else:
        wg = weight.reshape(groups, cout // groups, cg * K)
        out = np.matmul(wg, col.reshape(B, groups, cg * K, N))
    out = out.reshape((B, cout) + out_dims)
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1, 1)
    cache = {
        "col": col,
        "weight": weight,
        "x_shape": x.shape,
        "stride": stride,
        "padding": padding,
        "groups": groups,
        "has_bias": bias is not None,
    }
    return out, cache


def conv3d_backward(grad_out, cache):
    """Return (grad_input, grad_weight, grad_bias); grad_bias is None without bias."""
    col, weight = cache["col"], cache["weight"]
    stride, padding, groups = cache["stride"], cache["padding"], cache["groups"]
    B, C, T, H, W = cache["x_shape"]
    cout, cg = weight.shape[:2]
    ksize = weight.shape[2:]
    K = ksize[0] * ksize[1] * ksize[2]
    out_dims = tuple(
        conv_output_size(n, k, s, p) for n, k, s, p in zip((T, H, W), ksize, stride, padding)
    )
    if grad_out.shape != (B, cout) + out_dims:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output {(B, cout) + out_dims}"
        )
    N = out_dims[0] * out_dims[1] * out_dims[2]

    g = grad_out.reshape(B, groups, cout // groups, N)
    colg = col.reshape(B, groups, cg * K, N)
    grad_w = np.matmul(g, colg.swapaxes(-1, -2)).sum(axis=0).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4)) if cache["has_bias"] else None

    wg = weight.reshape(groups, cout // groups, cg * K)
    grad_col = np.matmul(wg.swapaxes(-1, -2), g).reshape((B, C, K) + out_dims)

    if K == 1 and not any(padding):
        grad_x = np.zeros((B, C, T, H, W), dtype=grad_out.dtype)
        grad_x[(slice(None), slice(None)) + _window_slices((0, 0, 0), out_dims, stride)] = grad_col[:, :, 0]
        return grad_x, grad_w, grad_b

    pt, ph, pw = padding
    grad_xp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=grad_out.dtype)
    for i, off in enumerate(itertools.product(*(range(k) for k in ksize))):
        grad_xp[(slice(None), slice(None)) + _window_slices(off, out_dims, stride)] += grad_col[:, :, i]
    grad_x = grad_xp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

_BN_AXES = (0, 2, 3, 4)


def _bshape(v):
    return v.reshape(1, -1, 1, 1, 1)


def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, *,
                        training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running
    statistics are updated in place (unbiased variance, as PyTorch does).
    In inference mode the running statistics are used and nothing mutates.
    """
    if x.ndim != 5 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(
            f"batchnorm expects (B,{gamma.shape[0]},T,H,W) input, got {x.shape}"
        )
    if eps <= 0:
        raise ConfigurationError("batchnorm epsilon must be positive")
    if training:
        n = x.size // x.shape[1]
        if n < 2:
            raise StatisticsError(
                f"batchnorm needs at least 2 values per channel in training mode, got {n}"
            )
        mean = x.mean(axis=_BN_AXES)
        xc = x - _bshape(mean)
        var = np.mean(xc * xc, axis=_BN_AXES)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (n / (n - 1))).astype(running_var.dtype)
    else:
        xc = x - _bshape(running_mean.astype(x.dtype))
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * _bshape(inv_std)
    out = xhat * _bshape(gamma) + _bshape(beta)
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "training": training}
    return out, cache


def batchnorm3d_backward(grad_out, cache):
    """Return (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    if grad_out.shape != xhat.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {xhat.shape}")
    grad_beta = grad_out.sum(axis=_BN_AXES)
    grad_gamma = (grad_out * xhat).sum(axis=_BN_AXES)
    scale = _bshape(gamma * inv_std)
    if not cache["training"]:
        return grad_out * scale, grad_gamma, grad_beta
    n = grad_out.size // grad_out.shape[1]
    grad_x = scale * (grad_out - _bshape(grad_beta / n) - xhat * _bshape(grad_gamma / n))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# elementwise, pooling, heads
# ---------------------------------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(grad_out, mask):
    if grad_out.shape != mask.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {mask.shape}")
    return np.where(mask, grad_out, np.zeros((), dtype=grad_out.dtype))


def maxpool3d_forward(x, kernel, stride=None, padding=0):
    """Max pooling with -inf padding.

    The cache records, per output element, the offset of the first maximum
    in the window (lowest linear index wins ties).
    """
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    padding = _triple(padding)
    B, C, T, H, W = x.shape
    padded = [n + 2 * p for n, p in zip((T, H, W), padding)]
    if any(k > n for k, n in zip(kernel, padded)):
        raise ConfigurationError(
            f"pooling window {kernel} larger than padded input {tuple(padded)}"
        )
    out_dims = tuple(
        conv_output_size(n, k, s, p) for n, k, s, p in zip((T, H, W), kernel, stride, padding)
    )
    xp = _pad5(x, padding, value=-np.inf)
    out = None
    arg = np.zeros((B, C) + out_dims, dtype=np.int16)
    for i, off in enumerate(itertools.product(*(range(k) for k in kernel))):
        win = xp[(slice(None), slice(None)) + _window_slices(off, out_dims, stride)]
        if out is None:
            out = win.copy()
            continue
        better = win > out
        np.copyto(out, win, where=better)
        arg[better] = i
    cache = {"arg": arg, "x_shape": x.shape, "kernel": kernel, "stride": stride,
             "padding": padding}
    return out, cache


def maxpool3d_backward(grad_out, cache):
    arg, kernel, stride, padding = cache["arg"], cache["kernel"], cache["stride"], cache["padding"]
    if grad_out.shape != arg.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {arg.shape}")
    B, C, T, H, W = cache["x_shape"]
    pt, ph, pw = padding
    out_dims = arg.shape[2:]
    grad_xp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=grad_out.dtype)
    zero = np.zeros((), dtype=grad_out.dtype)
    for i, off in enumerate(itertools.product(*(range(k) for k in kernel))):
        grad_xp[(slice(None), slice(None)) + _window_slices(off, out_dims, stride)] += np.where(
            arg == i, grad_out, zero
        )
    return np.ascontiguousarray(grad_xp[:, :, pt:pt + T, ph:ph + H, pw:pw + W])


def avgpool3d_forward(x, kernel, stride=None):
    """Unpadded average pooling (used by dense-network transitions)."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    B, C, T, H, W = x.shape
    out_dims = tuple(conv_output_size(n, k, s, 0) for n, k, s in zip((T, H, W), kernel, stride))
    if min(out_dims) < 1:
        raise ConfigurationError(f"pooling window {kernel} larger than input {(T, H, W)}")
    out = np.zeros((B, C) + out_dims, dtype=x.dtype)
    for off in itertools.product(*(range(k) for k in kernel)):
        out += x[(slice(None), slice(None)) + _window_slices(off, out_dims, stride)]
    out *= x.dtype.type(1.0 / (kernel[0] * kernel[1] * kernel[2]))
    return out, {"x_shape": x.shape, "kernel": kernel, "stride": stride}


def avgpool3d_backward(grad_out, cache):
    kernel, stride = cache["kernel"], cache["stride"]
    out_dims = grad_out.shape[2:]
    grad_x = np.zeros(cache["x_shape"], dtype=grad_out.dtype)
    g = grad_out * grad_out.dtype.type(1.0 / (kernel[0] * kernel[1] * kernel[2]))
    for off in itertools.product(*(range(k) for k in kernel)):
        grad_x[(slice(None), slice(None)) + _window_slices(off, out_dims, stride)] += g
    return grad_x


def global_avg_pool_forward(x):
    if x.ndim != 5:
        raise DimensionError(f"global average pool expects 5-D input, got {x.shape}")
    return x.mean(axis=(2, 3, 4)), x.shape


def global_avg_pool_backward(grad_out, x_shape):
    n = x_shape[2] * x_shape[3] * x_shape[4]
    g = (grad_out / n).astype(grad_out.dtype)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None, None], x_shape))


def linear_forward(x, weight, bias=None):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects (B,{weight.shape[1]}) input, got {x.shape}"
        )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(grad_out, cache):
    x, weight, has_bias = cache
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b


def concat_channels_forward(inputs):
    if not inputs:
        raise DimensionError("concat needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise DimensionError(
                f"concat inputs disagree outside the channel axis: {ref} vs {t.shape}"
            )
    sizes = [t.shape[1] for t in inputs]
    if len(inputs) == 1:
        return inputs[0], sizes
    return np.concatenate(inputs, axis=1), sizes


def concat_channels_backward(grad_out, sizes):
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1)]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, K), got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K}): {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= B
    return loss, grad.astype(logits.dtype, copy=False)

"""Differentiable layers used by the channel-search networks.

Layout conventions: activations are NCHW, convolution kernels are
``(k, k, c_in, c_out)`` and depthwise kernels ``(k, k, 1, c)``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad_nhwc(x: np.ndarray, padding: int) -> np.ndarray:
    """NCHW array -> zero-padded NHWC copy."""
    n, c, h, w = x.shape
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    out[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    return out


def _taps(k: int, stride: int, ho: int, wo: int):
    """Slices of the padded input read by each kernel tap (i, j)."""
    for i in range(k):
        for j in range(k):
            yield i, j, (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    depthwise: bool = False,
    name: str = "conv",
) -> Tensor:
    """2-D cross-correlation (no bias).

    With ``depthwise=True`` each channel is convolved with its own
    ``k x k`` filter and the kernel has shape ``(k, k, 1, c)``.
    Patches are gathered channels-last, one strided copy per kernel tap.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected NCHW input, got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"{name}: expected (k, k, c_in, c_out) kernel, got {kernel.shape}")
    k, k2, c_in, c_out = kernel.shape
    n, c, h, w = x.shape
    if k != k2:
        raise DimensionError(f"{name}: non-square kernel {kernel.shape}")
    if depthwise:
        if c_in != 1 or c_out != c:
            raise DimensionError(f"{name}: depthwise kernel {kernel.shape} does not match {c} input channels")
    elif c_in != c:
        raise DimensionError(f"{name}: input has {c} channels but kernel expects {c_in}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"{name}: kernel {k} too large for input {h}x{w}")

    xp = _pad_nhwc(x.data, padding)
    kd = kernel.data
    hp, wp = xp.shape[1], xp.shape[2]

    def scatter(parts) -> np.ndarray:
        dxp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        for (i, j, sl), part in parts:
            dxp[sl] += part
        return dxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)

    if depthwise:
        taps = list(_taps(k, stride, ho, wo))
        out = np.zeros((n, ho, wo, c), dtype=x.dtype)
        for i, j, sl in taps:
            out += xp[sl] * kd[i, j, 0]

        def backward(g):
            gn = g.transpose(0, 2, 3, 1)
            dk = None
            if kernel.requires_grad:
                dk = np.empty_like(kd)
                for i, j, sl in taps:
                    dk[i, j, 0] = np.einsum("nhwc,nhwc->c", xp[sl], gn)
            dx = scatter(((t, gn * kd[t[0], t[1], 0]) for t in taps)) if x.requires_grad else None
            return dx, dk

        return Tensor._make(out.transpose(0, 3, 1, 2), (x, kernel), backward)

    taps = list(_taps(k, stride, ho, wo))
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i, j, sl in taps:
        cols[:, :, :, i, j, :] = xp[sl]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wm = kd.reshape(k * k * c, c_out)
    out = (cols @ wm).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dk = (cols.T @ gm).reshape(kd.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wm.T).reshape(n, ho, wo, k, k, c)
            dx = scatter(((t, dcols[:, :, :, t[0], t[1], :]) for t in taps))
        return dx, dk

    return Tensor._make(out, (x, kernel), backward)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over axis 1.

    In train mode batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the running buffers are used.
    """
    x = as_tensor(x)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm: affine parameters {scale.shape} do not match {c} channels")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    gamma = scale.data.reshape(bshape)

    if train:
        mean = _channel_sum(x.data) / m
        centered = x.data - mean.reshape(bshape).astype(x.dtype)
        var = _channel_sum(centered * centered) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x.data - mean.reshape(bshape).astype(x.dtype)

    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = centered * invstd
    out = gamma * xhat + shift.data.reshape(bshape)

    def backward(g):
        dscale = _channel_sum(g * xhat)
        dshift = _channel_sum(g)
        dx = None
        if x.requires_grad:
            if train:
                s1 = (dshift / m).astype(x.dtype).reshape(bshape)
                s2 = (dscale / m).astype(x.dtype).reshape(bshape)
                dx = (gamma * invstd) * (g - s1 - xhat * s2)
            else:
                dx = g * (gamma * invstd)
        return dx, dscale, dshift

    return Tensor._make(out, (x, scale, shift), backward)


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Per-channel (axis 1) sum; float64 accumulation across the batch axis."""
    if a.ndim > 2:
        a = a.sum(axis=tuple(range(2, a.ndim)))
    return a.sum(axis=0, dtype=np.float64)


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` average pooling."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g,)

    return Tensor._make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial axes: ``(N, C, H, W) -> (N, C)``."""
    return x.mean(axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    return out + bias if bias is not None else out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape} labels for {n} rows")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def channel_mask(x: Tensor, mask) -> Tensor:
    """Multiply every channel of ``x`` by its entry in the length-C ``mask``."""
    mask = as_tensor(mask, dtype=x.dtype)
    c = x.shape[1]
    if mask.shape != (c,):
        raise DimensionError(f"channel_mask: mask of length {mask.shape} for {c} channels")
    return x * mask.reshape((1, c) + (1,) * (x.ndim - 2))


def channel_gather(x: Tensor, source: np.ndarray) -> Tensor:
    """Select channels by index; negative indices produce zero channels."""
    source = np.asarray(source, dtype=np.int64)
    valid = source >= 0
    src = np.where(valid, source, 0)
    vshape = (1, len(source)) + (1,) * (x.ndim - 2)
    out = x.data[:, src] * valid.reshape(vshape).astype(x.dtype)
    c = x.shape[1]

    def backward(g):
        dx = np.zeros(g.shape[:1] + (c,) + g.shape[2:], dtype=g.dtype)
        np.add.at(dx, (slice(None), src[valid]), g[:, valid])
        return (dx,)

    return Tensor._make(out, (x,), backward)


def sigmoid_t(alpha: Tensor, temperature: float) -> Tensor:
    """Numerically stable ``1 / (1 + exp(-alpha / T))`` with its gradient."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = alpha.data.astype(np.float64) / temperature
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # e / (1 + e)^2 equals s(1 - s) without cancellation at saturation
    slope = e / np.square(1.0 + e) / temperature

    def backward(g):
        return (g * slope,)

    return Tensor._make(out.astype(alpha.dtype), (alpha,), backward)

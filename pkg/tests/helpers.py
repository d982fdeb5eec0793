"""Shared oracles for the test-suite: finite differences and a loop convolution."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from annealprune.engine import Parameter, Tensor
from annealprune.models import ArchitectureSpec, LayerSpec


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-9,
    max_coords: int = 60,
    seed: int = 0,
) -> float:
    """Fraction of probed coordinates whose analytic gradient matches central differences.

    Coordinates are sampled (at most ``max_coords`` per parameter). A
    coordinate passes when ``|a - n| <= rtol * max(|a|, |n|) + atol``.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.array(p.grad, dtype=np.float64) if p.grad is not None else np.zeros(p.shape) for p in params]
    rng = np.random.default_rng(seed)
    passed = total = 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = a.reshape(-1)[i]
            total += 1
            passed += abs(ana - num) <= rtol * max(abs(ana), abs(num)) + atol
    return passed / total


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int, depthwise: bool = False) -> np.ndarray:
    """Direct nested-loop cross-correlation; ``w`` is (k, k, c_in, c_out) or (k, k, 1, c)."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    c_out = w.shape[3]
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    if depthwise:
                        out[b, o, i, j] = np.sum(patch[o] * w[:, :, 0, o])
                    else:
                        out[b, o, i, j] = sum(np.sum(patch[ci] * w[:, :, ci, o]) for ci in range(c))
    return out


def param64(rng: np.random.Generator, *shape, scale: float = 1.0) -> Parameter:
    return Parameter(rng.normal(0.0, scale, shape).astype(np.float64))


def to_float64(net):
    """Cast a network's parameters and buffers to float64 in place (for gradient checks)."""
    for k, p in net.params.items():
        p.data = p.data.astype(np.float64)
    return net


def two_layer_spec() -> ArchitectureSpec:
    """Stem plus two masked convs with 4 + 4 indicator channels."""
    layers = (
        LayerSpec("stem", "conv", 3, 3, 2, 1, 6, 6),
        LayerSpec("c1", "conv", 3, 2, 4, 1, 6, 6, None, "a"),
        LayerSpec("c2", "conv", 3, 4, 4, 2, 3, 3, "a", "b"),
        LayerSpec("pool", "pool", 3, 4, 4, 1, 1, 1),
        LayerSpec("fc", "linear", 1, 4, 5, 1, 1, 1, "b", None),
    )
    spec = ArchitectureSpec("plain", (3, 6, 6), 5, layers, (), (("a", 4), ("b", 4)))
    spec.validate()
    return spec

"""Structural regularizers over relaxed channel indicators.

All three are differentiable functions of the auxiliary parameters and are
evaluated in float64 so that, at hard 0/1 indicators, the FLOPs expectation
reproduces the integer FLOPs count exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import Tensor, stack_sum
from .indicators import IndicatorSet
from .models import ArchitectureSpec

Side = Union[str, int, None]


@dataclass
class RegularizerConfig:
    """Weights of the indicator-side objective ``L_val + sum(lambda_i * R_i)``."""

    lambda_flops: float = 2.0
    epsilon: float = 0.05
    lambda_sym: float = 0.0
    lambda_lasso: float = 0.0
    target_flops: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.target_flops is not None and not self.target_flops > 0:
            raise ValueError("target_flops must be positive")


def _site_sums(indicators: IndicatorSet) -> Dict[str, Tensor]:
    return {s: indicators.relaxed(s).astype(np.float64).sum() for s in indicators.alphas}


def lasso(indicators: IndicatorSet) -> Tensor:
    """Sum of all relaxed indicator values (they are positive, so |.| is a no-op)."""
    sums = list(_site_sums(indicators).values())
    return stack_sum(sums) if sums else Tensor(0.0, dtype=np.float64)


def flops_expectation(indicators: IndicatorSet, spec: ArchitectureSpec) -> Tensor:
    """Expected multiply-accumulates of the pruned network under relaxed indicators.

    Each conv contributes ``h * w * k^2 * S_in * S_out`` where ``S`` is the
    sum of the relaxed indicators of the site on that side (the full channel
    count when the side is unmasked). Depthwise convs contribute
    ``h * w * k^2 * S``; the linear head uses ``p = 1``.
    """
    sums = _site_sums(indicators)

    def side(site: Optional[str], count: int):
        return sums[site] if site is not None else float(count)

    terms = []
    for lay in spec.layers:
        if lay.kind == "pool":
            continue
        p = float(lay.h * lay.w * lay.k * lay.k)
        if lay.kind == "dwconv":
            s = side(lay.out_site, lay.c_out)
            terms.append(s * p if isinstance(s, Tensor) else Tensor(p * s, dtype=np.float64))
            continue
        s_in, s_out = side(lay.in_site, lay.c_in), side(lay.out_site, lay.c_out)
        if isinstance(s_in, Tensor):
            term = s_in * s_out * p if isinstance(s_out, Tensor) else s_in * (s_out * p)
        elif isinstance(s_out, Tensor):
            term = s_out * (s_in * p)
        else:
            term = Tensor(p * s_in * s_out, dtype=np.float64)
        terms.append(term)
    return stack_sum(terms) if terms else Tensor(0.0, dtype=np.float64)


def flops_regularizer(expected: Tensor, target: float, epsilon: float = 0.05) -> Tensor:
    """Piecewise log penalty keeping ``expected`` inside ``[(1 - eps) F, F]``.

    ``log E`` above the band, ``-log E`` below it, exactly zero inside.
    """
    e = float(expected.data)
    if not e > 0:
        raise ValueError(f"expected FLOPs must be positive, got {e}")
    if not target > 0:
        raise ValueError(f"target FLOPs must be positive, got {target}")
    ratio = e / target
    if ratio > 1:
        return expected.log()
    if ratio < 1 - epsilon:
        return -expected.log()
    return expected * 0.0


def symmetry(indicators: IndicatorSet, pairs: Sequence[Tuple[Side, Side]]) -> Tensor:
    """Sum over residual pairs of the absolute gap between relaxed channel sums.

    A side given as an integer is a fixed (unmasked) channel count.
    """
    sums = _site_sums(indicators)
    terms = []
    for left, right in pairs:
        a = sums[left] if isinstance(left, str) else float(left)
        b = sums[right] if isinstance(right, str) else float(right)
        if isinstance(a, Tensor) or isinstance(b, Tensor):
            gap = a - b if isinstance(a, Tensor) else (-(b - a))
            terms.append(gap.abs())
        else:
            terms.append(Tensor(abs(a - b), dtype=np.float64))
    return stack_sum(terms) if terms else Tensor(0.0, dtype=np.float64)


def regularization(
    indicators: IndicatorSet, spec: ArchitectureSpec, config: RegularizerConfig
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted regularizer total plus the individual values for logging."""
    parts = []
    values: Dict[str, float] = {}
    expected = flops_expectation(indicators, spec)
    values["e_flops"] = float(expected.data)
    if config.lambda_flops:
        if config.target_flops is None:
            raise ValueError("lambda_flops > 0 needs a target_flops")
        r = flops_regularizer(expected, config.target_flops, config.epsilon)
        values["r_flops"] = float(r.data)
        parts.append(r * config.lambda_flops)
    if config.lambda_sym:
        r = symmetry(indicators, spec.symmetry_pairs())
        values["r_sym"] = float(r.data)
        parts.append(r * config.lambda_sym)
    if config.lambda_lasso:
        r = lasso(indicators)
        values["r_lasso"] = float(r.data)
        parts.append(r * config.lambda_lasso)
    total = stack_sum(parts) if parts else Tensor(0.0, dtype=np.float64)
    return total, values

"""Annealing-relaxed channel indicators.

Each indicator site owns a vector of auxiliary parameters ``alpha``. The
relaxed indicator is ``H_T(alpha) = sigmoid(alpha / T)``; as the temperature
``T`` anneals towards zero it approaches the unit step, which is what
:func:`binarize` evaluates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .engine import Parameter, Tensor, sigmoid_t

SCHEDULE_KINDS = ("linear", "cosine", "smallT", "constant")

ALPHA_INIT_MEAN = 1.0
ALPHA_INIT_STD = 0.1


def relaxed_indicator(alpha, temperature: float):
    """Scalar / array form of ``H_T``; returns floats in (0, 1) away from saturation."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(alpha, dtype=np.float64) / temperature
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TemperatureSchedule:
    """``T(n) = T0 / sigma(n)`` evaluated once per search epoch.

    ``linear``: sigma = 49 n / N + 1 (ends at T0 / 50).
    ``cosine``: sigma = 49 (1 - cos(pi/2 * n / N)) + 1.
    ``smallT``: sigma = 99 n / N + 1 (ends at T0 / 100).
    ``constant``: sigma = 1, the no-annealing ablation.
    """

    kind: str = "linear"
    t0: float = 1.0
    n_max: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if self.n_max < 0:
            raise ValueError("n_max must be non-negative")

    def sigma(self, n: int) -> float:
        if n < 0 or n > self.n_max:
            raise ValueError(f"epoch {n} outside [0, {self.n_max}]")
        if self.kind == "constant" or self.n_max == 0:
            return 1.0
        frac = n / self.n_max
        if self.kind == "linear":
            return 49.0 * frac + 1.0
        if self.kind == "smallT":
            return 99.0 * frac + 1.0
        return 49.0 * (1.0 - math.cos(math.pi / 2.0 * frac)) + 1.0


def temperature_at(schedule: TemperatureSchedule, n: int) -> float:
    return schedule.t0 / schedule.sigma(n)


@dataclass
class IndicatorSet:
    """Auxiliary parameters for every indicator site plus the current temperature.

    ``site_map`` records which layers each site masks; it is informational
    for serialization and reports, the forward pass reads sites from the
    architecture.
    """

    alphas: Dict[str, Parameter]
    temperature: float = 1.0
    site_map: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def initialize(
        cls,
        site_widths: Mapping[str, int],
        rng: np.random.Generator,
        temperature: float = 1.0,
        site_map: Optional[Mapping[str, Sequence[str]]] = None,
        mean: float = ALPHA_INIT_MEAN,
        std: float = ALPHA_INIT_STD,
    ) -> "IndicatorSet":
        alphas = {
            site: Parameter(rng.normal(mean, std, size=width).astype(np.float32), name=f"alpha.{site}")
            for site, width in site_widths.items()
        }
        smap = {k: tuple(v) for k, v in (site_map or {}).items()}
        return cls(alphas, temperature, smap)

    @classmethod
    def from_masks(cls, masks: Mapping[str, np.ndarray], temperature: float = 1e-3) -> "IndicatorSet":
        """Indicators whose relaxed values are exactly 0/1 in float arithmetic."""
        alphas = {
            site: Parameter(np.where(np.asarray(m, dtype=bool), 1.0, -1.0).astype(np.float64), name=f"alpha.{site}")
            for site, m in masks.items()
        }
        return cls(alphas, temperature)

    @property
    def sites(self) -> List[str]:
        return list(self.alphas)

    def parameters(self) -> List[Parameter]:
        return list(self.alphas.values())

    def widths(self) -> Dict[str, int]:
        return {s: a.shape[0] for s, a in self.alphas.items()}

    def total_channels(self) -> int:
        return sum(self.widths().values())

    def set_temperature(self, temperature: float) -> None:
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.temperature = float(temperature)

    def relaxed(self, site: str) -> Tensor:
        return sigmoid_t(self.alphas[site], self.temperature)

    def relaxed_all(self) -> Dict[str, Tensor]:
        return {s: self.relaxed(s) for s in self.alphas}

    def relaxed_values(self) -> Dict[str, np.ndarray]:
        return {s: relaxed_indicator(a.data, self.temperature) for s, a in self.alphas.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {s: a.data.copy() for s, a in self.alphas.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for s, v in values.items():
            self.alphas[s].data[...] = v


def binarize(indicators: IndicatorSet, threshold: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Hard keep-masks per site.

    By default a channel is kept iff ``alpha > 0`` (the zero-temperature limit
    of ``H_T``; exact zeros are dropped). With ``threshold`` the relaxed value
    at the current temperature is compared instead: kept iff ``H_T >= threshold``.
    """
    if threshold is None:
        return {s: a.data > 0 for s, a in indicators.alphas.items()}
    return {s: v >= threshold for s, v in indicators.relaxed_values().items()}


def trace_counts(indicators: IndicatorSet, threshold: float = 0.5) -> Dict[str, int]:
    """Number of channels per site with relaxed indicator strictly above ``threshold``."""
    return {s: int(np.count_nonzero(v > threshold)) for s, v in indicators.relaxed_values().items()}


def binarization_gap(indicators: IndicatorSet) -> np.ndarray:
    """``min(I, 1 - I)`` for every relaxed indicator entry, concatenated over sites."""
    vals = indicators.relaxed_values()
    if not vals:
        return np.zeros(0)
    flat = np.concatenate([np.atleast_1d(v) for v in vals.values()])
    return np.minimum(flat, 1.0 - flat)


def write_trace_csv(path, sites: Sequence[str], rows: Iterable[Mapping]) -> None:
    """Write recoverability rows ``{"epoch", "temperature", "counts"}`` as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "temperature", *sites])
        for row in rows:
            counts = row["counts"]
            writer.writerow([row["epoch"], f"{row['temperature']:.6g}", *[counts[s] for s in sites]])


def read_trace_csv(path) -> List[Dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        sites = header[2:]
        rows = []
        for rec in reader:
            rows.append(
                {
                    "epoch": int(rec[0]),
                    "temperature": float(rec[1]),
                    "counts": {s: int(c) for s, c in zip(sites, rec[2:])},
                }
            )
    return rows

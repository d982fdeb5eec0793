"""Width-sampled baselines: Random, Constrained and Slimming instances.

Random draws every channel count independently as ``round(c * u)`` with
``u ~ U(0.5, 1)``. Constrained shares one ``u`` per stage across the stem and
all post-addition stream widths, so every identity shortcut joins equal
widths; the block-internal widths are drawn like Random. Slimming trains the
base model with an L1 penalty on BN scales and keeps the channels with the
largest ``|scale|`` until the FLOPs band is met.

Instances are trained from scratch with the fine-tuning recipe (Slimming
instances keep their inherited weights) and summarized by best/mean/std
accuracy.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from .data import Dataset, batches
from .derivation import derive, discrete_flops
from .indicators import IndicatorSet
from .models import ArchitectureSpec, Network, build_network
from .regularizers import symmetry
from .search import FinetuneConfig, SearchDiverged, finetune

KINDS = ("random", "constrained", "slimming")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_width(c: int, u: float) -> int:
    # the rounding guard keeps 0.5 * odd c at ceil(c / 2) despite float error
    return max(1, round_half_up(round(c * u, 9)))


@dataclass
class DesignSpaceConfig:
    base_spec: ArchitectureSpec
    kind: str = "random"
    num_instances: int = 10
    flops_band: Optional[Tuple[float, float]] = None
    seed: int = 0
    u_range: Tuple[float, float] = (0.5, 1.0)
    # rejection sampling gives up after this many draws per requested instance
    max_attempts_per_instance: int = 50
    # slimming only
    slimming_epochs: int = 10
    slimming_penalty: float = 1e-4
    slimming_lr: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_instances < 0:
            raise ValueError("num_instances must be >= 0")
        lo, hi = self.u_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"u_range must satisfy 0 < low <= high <= 1, got {self.u_range}")
        if self.flops_band is not None and self.flops_band[0] > self.flops_band[1]:
            raise ValueError(f"empty FLOPs band {self.flops_band}")


@dataclass
class Instance:
    index: int
    seed: int
    spec: ArchitectureSpec
    flops: int
    network: Optional[Network] = None  # inherited weights (slimming)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _stage_of(site: str) -> Optional[str]:
    # resnet sites look like "s2b1.b"
    return site.split("b", 1)[0] if site.startswith("s") and "b" in site else None


def sample_instance(config: DesignSpaceConfig, rng: np.random.Generator) -> ArchitectureSpec:
    """One Random or Constrained instance of ``config.base_spec``."""
    base = config.base_spec
    lo, hi = config.u_range

    def u() -> float:
        return float(rng.uniform(lo, hi)) if hi > lo else hi

    widths: Dict[str, int] = {}
    stem_c = base.stem.c_out
    if config.kind == "constrained" and base.family == "resnet":
        stage_u: Dict[str, float] = {}
        for site, c in base.sites:
            stage = _stage_of(site)
            if site.endswith(".b"):
                if stage not in stage_u:
                    stage_u[stage] = u()
                widths[site] = sample_width(c, stage_u[stage])
            else:
                widths[site] = sample_width(c, u())
        first = base.blocks[0]
        if first.shortcut is None:
            # the first stage's stream starts at the stem
            stem_c = widths[first.out_site]
        else:
            stem_c = sample_width(stem_c, u())
    elif config.kind in ("random", "constrained"):
        stem_c = sample_width(stem_c, u())
        for site, c in base.sites:
            widths[site] = sample_width(c, u())
    else:
        raise ValueError("slimming instances come from slimming_instance()")
    return base.with_widths(widths, stem_width=stem_c)


def width_symmetry(spec: ArchitectureSpec) -> float:
    """Symmetry regularizer at the hard widths of ``spec`` (0 when every pair matches)."""
    ind = IndicatorSet.from_masks({s: np.ones(c, dtype=bool) for s, c in spec.sites})
    return float(symmetry(ind, spec.symmetry_pairs()).data)


def _in_band(flops: int, band: Optional[Tuple[float, float]]) -> bool:
    return band is None or band[0] <= flops <= band[1]


def generate_instances(
    config: DesignSpaceConfig, data: Optional[Tuple[Dataset, Dataset]] = None
) -> List[Instance]:
    """Up to ``num_instances`` instances whose discrete FLOPs fall in the band.

    Draw ``j`` uses the generator seeded by ``(seed, j)``, so an instance is
    reproducible from its recorded seed pair. An unreachable band yields an
    empty list.
    """
    if config.kind == "slimming":
        if data is None:
            raise ValueError("slimming needs (train, val) data to train the base model")
        out = []
        for i in range(config.num_instances):
            inst = slimming_instance(config, data[0], seed=config.seed + i)
            if inst is not None:
                out.append(Instance(len(out), config.seed + i, inst.spec, inst.flops, inst.network))
        return out
    out: List[Instance] = []
    budget = config.num_instances * config.max_attempts_per_instance
    for draw in range(budget):
        if len(out) == config.num_instances:
            break
        spec = sample_instance(config, np.random.default_rng([config.seed, draw]))
        flops = discrete_flops(spec).total
        if _in_band(flops, config.flops_band):
            out.append(Instance(len(out), draw, spec, flops))
    return out


# ---------------------------------------------------------------------------
# slimming
# ---------------------------------------------------------------------------


def train_with_bn_penalty(
    net: Network, train: Dataset, epochs: int, penalty: float, lr: float, batch_size: int, seed: int
) -> Network:
    """SGD training with ``penalty * sum |BN scale|`` added to the loss."""
    rng = np.random.default_rng(seed)
    scales = [p for name, p in net.params.items() if name.endswith(".bn.scale")]
    opt = E.SGD(net.parameters(), lr, momentum=0.9, weight_decay=1e-4)
    for epoch in range(epochs):
        opt.lr = E.cosine_lr(lr, epoch, epochs)
        for xb, yb in batches(train, batch_size, rng):
            loss = E.softmax_cross_entropy(net.forward(xb, train=True), yb)
            if penalty:
                loss = loss + E.stack_sum([s.abs().sum() for s in scales]) * penalty
            if not math.isfinite(float(loss.data)):
                raise SearchDiverged(f"non-finite loss while training the slimming base (epoch {epoch})", {})
            opt.zero_grad()
            loss.backward()
            opt.step()
    return net


def channel_scores(net: Network) -> Dict[str, np.ndarray]:
    """Per-site channel importance: the largest |BN scale| among the site's producers."""
    out = {}
    for site, layers in net.spec.indicator_sites.items():
        mags = [np.abs(net.params[f"{name}.bn.scale"].data.astype(np.float64)) for name in layers]
        out[site] = np.max(mags, axis=0)
    return out


def cut_to_band(
    spec: ArchitectureSpec, scores: Dict[str, np.ndarray], band: Optional[Tuple[float, float]]
) -> Optional[Dict[str, np.ndarray]]:
    """Drop globally lowest-scored channels until FLOPs <= band high.

    Every site keeps its best channel. Returns the keep-masks, or ``None``
    when the smallest admissible cut still overshoots the band's low end.
    """
    if band is None:
        return {s: np.ones(len(v), dtype=bool) for s, v in scores.items()}
    order = []
    for s, v in scores.items():
        top = int(np.argmax(v))
        order += [(float(v[i]), s, i) for i in range(len(v)) if i != top]
    order.sort()

    def masks_after(k: int):
        keep = {s: np.ones(len(v), dtype=bool) for s, v in scores.items()}
        for _, s, i in order[:k]:
            keep[s][i] = False
        return keep

    def flops(k: int) -> int:
        keep = masks_after(k)
        return discrete_flops(spec.with_widths({s: int(m.sum()) for s, m in keep.items()})).total

    lo, hi = 0, len(order)
    if flops(hi) > band[1]:
        return None
    while lo < hi:  # smallest k with flops(k) <= high
        mid = (lo + hi) // 2
        if flops(mid) <= band[1]:
            hi = mid
        else:
            lo = mid + 1
    if flops(lo) < band[0]:
        return None
    return masks_after(lo)


def slimming_instance(config: DesignSpaceConfig, train: Dataset, seed: int) -> Optional[Instance]:
    rng = np.random.default_rng(seed)
    net = build_network(config.base_spec, rng)
    train_with_bn_penalty(
        net, train, config.slimming_epochs, config.slimming_penalty, config.slimming_lr, config.batch_size, seed
    )
    keep = cut_to_band(config.base_spec, channel_scores(net), config.flops_band)
    if keep is None:
        return None
    pruned = derive(net, keep)
    return Instance(0, seed, pruned.spec, pruned.flops().total, pruned.network)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class InstanceResult:
    index: int
    seed: int
    widths: Dict[str, int]
    stem_width: int
    flops: int
    accuracy: float
    diverged: bool = False


@dataclass
class SpaceSummary:
    kind: str
    results: List[InstanceResult] = field(default_factory=list)

    @property
    def valid(self) -> List[InstanceResult]:
        return [r for r in self.results if not r.diverged]

    @property
    def status(self) -> str:
        if not self.results:
            return "no instances in band"
        if not self.valid:
            return "all instances diverged"
        return "ok"

    def _accs(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.valid], dtype=np.float64)

    @property
    def best(self) -> Optional[InstanceResult]:
        valid = self.valid
        return max(valid, key=lambda r: (r.accuracy, -r.index)) if valid else None

    @property
    def mean(self) -> float:
        a = self._accs()
        return float(a.mean()) if a.size else float("nan")

    @property
    def std(self) -> float:
        a = self._accs()
        return float(a.std()) if a.size else float("nan")

    def to_csv(self, path) -> None:
        sites = list(self.results[0].widths) if self.results else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "seed", "stem", *sites, "flops", "accuracy", "diverged"])
            for r in self.results:
                acc = "" if r.diverged else f"{r.accuracy:.6f}"
                w.writerow([r.index, r.seed, r.stem_width, *(r.widths[s] for s in sites), r.flops, acc, int(r.diverged)])


def _train_one(args) -> InstanceResult:
    inst, train, val, ft = args
    if inst.network is not None:
        net = inst.network.copy()
    else:
        net = build_network(inst.spec, np.random.default_rng([ft.seed, inst.index]))
    widths = inst.spec.site_widths()
    try:
        _, acc, _ = finetune(net, train, val, ft)
    except SearchDiverged:
        return InstanceResult(inst.index, inst.seed, widths, inst.spec.stem.c_out, inst.flops, float("nan"), True)
    return InstanceResult(inst.index, inst.seed, widths, inst.spec.stem.c_out, inst.flops, acc)


def evaluate_space(
    instances: Sequence[Instance],
    train: Dataset,
    val: Dataset,
    finetune_config: FinetuneConfig,
    kind: str = "random",
    workers: int = 1,
) -> SpaceSummary:
    """Train every instance and collect accuracies, ordered by instance index."""
    ft = finetune_config
    if ft.from_scratch:
        raise ValueError("instances are built fresh already; leave from_scratch off")
    jobs = [(inst, train, val, ft) for inst in instances]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    return SpaceSummary(kind, sorted(results, key=lambda r: r.index))

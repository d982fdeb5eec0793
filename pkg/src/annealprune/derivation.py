"""Turning searched indicators into a concrete, smaller network.

The derived network keeps exactly the channels whose indicator survives
binarization. Weights and BN statistics are sliced (never recomputed), and
identity shortcuts whose input and output keep-sets differ route channels by
original index, filling zeros where the input lacks a channel. That is the
same arithmetic the supernet performs under hard 0/1 masks, so both produce
the same logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .engine import Parameter
from .models import ArchitectureSpec, Network


class DerivationError(RuntimeError):
    """A site lost every channel; the search needs a larger FLOPs target."""

    def __init__(self, site: str):
        super().__init__(f"layer collapsed: indicator site {site!r} keeps no channel")
        self.site = site


@dataclass
class FlopsReport:
    per_layer: List[Tuple[str, int]]
    total: int
    unpruned_total: int

    @property
    def ratio_vs_unpruned(self) -> float:
        return self.total / self.unpruned_total if self.unpruned_total else 1.0

    @property
    def pruning_ratio(self) -> float:
        """Fraction of FLOPs removed, the number shown in parentheses in pruning tables."""
        return 1.0 - self.ratio_vs_unpruned

    def to_text(self) -> str:
        lines = ["layer,flops"]
        lines += [f"{name},{flops}" for name, flops in self.per_layer]
        lines.append(f"total,{self.total}")
        lines.append(f"unpruned,{self.unpruned_total}")
        lines.append(f"FLOPs (pruning ratio),{self.total:.2E} ({100 * self.pruning_ratio:.1f}%)")
        return "\n".join(lines) + "\n"


def layer_flops(spec: ArchitectureSpec) -> List[Tuple[str, int]]:
    """Integer multiply-accumulate count of each weighted layer."""
    out = []
    for lay in spec.layers:
        if lay.kind == "pool":
            continue
        if lay.kind == "linear":
            flops = lay.c_in * lay.c_out
        elif lay.kind == "dwconv":
            flops = lay.h * lay.w * lay.k * lay.k * lay.c_out
        else:
            flops = lay.h * lay.w * lay.k * lay.k * lay.c_in * lay.c_out
        out.append((lay.name, int(flops)))
    return out


def discrete_flops(spec: ArchitectureSpec, reference: Optional[ArchitectureSpec] = None) -> FlopsReport:
    per_layer = layer_flops(spec)
    total = sum(f for _, f in per_layer)
    ref_total = total if reference is None else sum(f for _, f in layer_flops(reference))
    return FlopsReport(per_layer, total, ref_total)


@dataclass
class PrunedModel:
    network: Network
    # site -> kept original channel indices, strictly increasing
    provenance: Dict[str, Tuple[int, ...]]
    source_spec: Optional[ArchitectureSpec] = None

    @property
    def spec(self) -> ArchitectureSpec:
        return self.network.spec

    def flops(self) -> FlopsReport:
        return discrete_flops(self.spec, self.source_spec)

    def kept_indices(self, layer_name: str) -> Tuple[Optional[Tuple[int, ...]], Optional[Tuple[int, ...]]]:
        """(input, output) kept original indices of a layer; ``None`` means all."""
        lay = self.spec.layer(layer_name)
        pin = self.provenance.get(lay.in_site) if lay.in_site else None
        pout = self.provenance.get(lay.out_site) if lay.out_site else None
        return pin, pout

    # -- persistence ------------------------------------------------------------
    def save(self, directory) -> None:
        """Write ``arch.txt``, ``weights.npz`` and ``provenance.json`` into ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "arch.txt").write_text(self.spec.to_text())
        if self.source_spec is not None:
            (d / "source_arch.txt").write_text(self.source_spec.to_text())
        arrays = {k: np.asarray(v) for k, v in sorted(self.network.state_arrays().items())}
        np.savez(d / "weights.npz", **arrays)
        (d / "provenance.json").write_text(
            json.dumps({s: list(v) for s, v in self.provenance.items()}, indent=1, sort_keys=True)
        )

    @classmethod
    def load(cls, directory) -> "PrunedModel":
        d = Path(directory)
        spec = ArchitectureSpec.from_text((d / "arch.txt").read_text())
        source = None
        if (d / "source_arch.txt").exists():
            source = ArchitectureSpec.from_text((d / "source_arch.txt").read_text())
        net = network_from_arrays(spec, dict(np.load(d / "weights.npz")))
        prov = {s: tuple(v) for s, v in json.loads((d / "provenance.json").read_text()).items()}
        return cls(net, prov, source)


def network_from_arrays(spec: ArchitectureSpec, arrays: Mapping[str, np.ndarray]) -> Network:
    params = {k: Parameter(v, name=k) for k, v in arrays.items() if not k.endswith((".bn.mean", ".bn.var"))}
    buffers = {k: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.endswith((".bn.mean", ".bn.var"))}
    return Network(spec, params, buffers)


def derive(net: Network, keep: Mapping[str, np.ndarray]) -> PrunedModel:
    """Slice ``net`` down to the channels marked True in ``keep`` (site -> bool mask)."""
    spec = net.spec
    widths = spec.site_widths()
    kept: Dict[str, np.ndarray] = {}
    for site, width in widths.items():
        mask = np.asarray(keep[site], dtype=bool) if site in keep else np.ones(width, dtype=bool)
        if mask.shape != (width,):
            raise ValueError(f"keep-mask for {site!r} has shape {mask.shape}, expected ({width},)")
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise DerivationError(site)
        kept[site] = idx

    # identity shortcuts route by original channel index
    maps: Dict[str, Optional[Tuple[int, ...]]] = {}
    for b in spec.blocks:
        if b.shortcut is not None:
            continue
        out_idx = kept[b.out_site]
        if b.in_site is None:
            in_idx = np.arange(spec.layer(b.conv1).c_in)
        else:
            in_idx = kept[b.in_site]
        if np.array_equal(in_idx, out_idx):
            maps[b.name] = None
            continue
        position = {int(c): j for j, c in enumerate(in_idx)}
        maps[b.name] = tuple(position.get(int(c), -1) for c in out_idx)

    new_spec = spec.with_widths({s: len(v) for s, v in kept.items()}, shortcut_maps=maps)

    def select(site: Optional[str]):
        return kept[site] if site is not None else slice(None)

    params: Dict[str, Parameter] = {}
    buffers: Dict[str, np.ndarray] = {}
    for lay in spec.layers:
        if lay.kind == "pool":
            continue
        src_in, src_out = select(lay.in_site), select(lay.out_site)
        w = net.params[f"{lay.name}.weight"].data
        if lay.kind == "linear":
            params[f"{lay.name}.weight"] = w[src_in, :].copy()
            params[f"{lay.name}.bias"] = net.params[f"{lay.name}.bias"].data.copy()
            continue
        if lay.kind == "dwconv":
            params[f"{lay.name}.weight"] = w[:, :, :, src_out].copy()
        else:
            params[f"{lay.name}.weight"] = w[:, :, src_in, :][:, :, :, src_out].copy()
        for key in ("bn.scale", "bn.shift"):
            params[f"{lay.name}.{key}"] = net.params[f"{lay.name}.{key}"].data[src_out].copy()
        for key in ("bn.mean", "bn.var"):
            buffers[f"{lay.name}.{key}"] = net.buffers[f"{lay.name}.{key}"][src_out].copy()

    pruned = Network(new_spec, {k: Parameter(v, name=k) for k, v in params.items()}, buffers)
    provenance = {s: tuple(int(i) for i in v) for s, v in kept.items()}
    return PrunedModel(pruned, provenance, spec)


def hard_masks(keep: Mapping[str, np.ndarray], dtype=np.float32) -> Dict[str, np.ndarray]:
    return {s: np.asarray(m, dtype=dtype) for s, m in keep.items()}


def verify_equivalence(
    pruned: PrunedModel,
    supernet: Network,
    keep: Mapping[str, np.ndarray],
    batch: np.ndarray,
    soft_masks: Optional[Mapping] = None,
) -> float:
    """Max absolute logit gap between the pruned net and the masked supernet (eval mode).

    The supernet is masked with the hard 0/1 ``keep`` masks, or with
    ``soft_masks`` when given (to measure the residual annealing gap).
    """
    masks = soft_masks if soft_masks is not None else hard_masks(keep)
    a = pruned.network.forward(batch, train=False).data.astype(np.float64)
    b = supernet.forward(batch, masks=masks, train=False).data.astype(np.float64)
    return float(np.max(np.abs(a - b)))

"""Residual and depthwise-separable networks with channel-indicator sites.

An :class:`ArchitectureSpec` is a flat, immutable description of a network:
every weighted layer with its kernel size, channel counts, stride and output
map size, plus the indicator site that masks its input and output channels.
Residual networks additionally list their blocks.

Indicator placement:

* residual nets - site ``<block>.a`` masks the first 3x3 conv of a block,
  site ``<block>.b`` masks the stream after the residual addition;
* depthwise-separable nets - one site per pointwise conv, shared by the
  following depthwise conv on both of its sides.

The stem conv never carries a site.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import engine as E
from .engine import DimensionError, Parameter, Tensor

LAYER_KINDS = ("conv", "dwconv", "pwconv", "linear", "pool")

# CIFAR-style MobileNet: (out_channels, stride) per depthwise-separable unit.
MOBILENET_BASE = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
)  # fmt: skip
MOBILENET_STEM = 32


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    k: int
    c_in: int
    c_out: int
    stride: int
    h: int
    w: int
    in_site: Optional[str] = None
    out_site: Optional[str] = None

    @property
    def padding(self) -> int:
        return self.k // 2


@dataclass(frozen=True)
class BlockSpec:
    name: str
    conv1: str
    conv2: str
    shortcut: Optional[str]
    in_site: Optional[str]
    mid_site: str
    out_site: str
    # identity routing for pruned nets: output position -> input position or -1
    shortcut_map: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    input_shape: Tuple[int, int, int]
    num_classes: int
    layers: Tuple[LayerSpec, ...]
    blocks: Tuple[BlockSpec, ...] = ()
    sites: Tuple[Tuple[str, int], ...] = ()

    # -- lookups -------------------------------------------------------------
    def layer(self, name: str) -> LayerSpec:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    @property
    def stem(self) -> LayerSpec:
        return self.layers[0]

    def site_widths(self) -> Dict[str, int]:
        return dict(self.sites)

    @property
    def indicator_sites(self) -> Dict[str, Tuple[str, ...]]:
        """Site -> names of the layers whose outputs it masks."""
        out: Dict[str, List[str]] = {s: [] for s, _ in self.sites}
        for lay in self.layers:
            if lay.out_site is not None:
                out[lay.out_site].append(lay.name)
        return {s: tuple(v) for s, v in out.items()}

    @property
    def residual_pairs(self) -> List[Tuple[Optional[str], str]]:
        """(input site, output site) of every identity-shortcut block.

        ``None`` on the input side means the block reads the unmasked stem
        stream; see :meth:`symmetry_pairs` for the resolved form.
        """
        return [(b.in_site, b.out_site) for b in self.blocks if b.shortcut is None]

    def symmetry_pairs(self) -> List[Tuple[Union[str, int], str]]:
        """Residual pairs with unmasked inputs replaced by their fixed width."""
        pairs: List[Tuple[Union[str, int], str]] = []
        for b in self.blocks:
            if b.shortcut is not None:
                continue
            left = b.in_site if b.in_site is not None else self.layer(b.conv1).c_in
            pairs.append((left, b.out_site))
        return pairs

    def weighted_layers(self) -> List[LayerSpec]:
        return [lay for lay in self.layers if lay.kind != "pool"]

    def main_path_convs(self) -> List[LayerSpec]:
        shortcuts = {b.shortcut for b in self.blocks}
        return [lay for lay in self.layers if lay.kind in ("conv", "dwconv", "pwconv") and lay.name not in shortcuts]

    # -- validation ------------------------------------------------------------
    def validate(self) -> None:
        widths = self.site_widths()
        stem = self.stem
        if stem.in_site is not None or stem.out_site is not None:
            raise ValueError("the stem layer must not carry an indicator site")
        for lay in self.layers:
            if lay.kind not in LAYER_KINDS:
                raise ValueError(f"{lay.name}: unknown kind {lay.kind!r}")
            if lay.kind == "pool":
                continue
            for side, site, count in (("in", lay.in_site, lay.c_in), ("out", lay.out_site, lay.c_out)):
                if site is not None and widths.get(site) != count:
                    raise ValueError(f"{lay.name}: {side}put site {site!r} width {widths.get(site)} != {count}")
            if lay is not stem and lay.in_site is None and lay.c_in != stem.c_out:
                raise ValueError(f"{lay.name}: unmasked input of width {lay.c_in} must read the stem ({stem.c_out})")
            if lay.kind == "dwconv" and (lay.c_in != lay.c_out or lay.in_site != lay.out_site):
                raise ValueError(f"{lay.name}: depthwise layer must keep its width and share one site")
        for b in self.blocks:
            c1, c2 = self.layer(b.conv1), self.layer(b.conv2)
            if c1.c_out != c2.c_in:
                raise ValueError(f"{b.name}: conv1 -> conv2 width mismatch")
            if b.shortcut is None and b.shortcut_map is None and c1.c_in != c2.c_out:
                raise ValueError(f"{b.name}: identity shortcut needs equal widths ({c1.c_in} vs {c2.c_out})")
            if b.shortcut_map is not None and len(b.shortcut_map) != c2.c_out:
                raise ValueError(f"{b.name}: shortcut map length != output width")

    # -- width rewriting ---------------------------------------------------------
    def with_widths(
        self,
        site_widths: Mapping[str, int],
        stem_width: Optional[int] = None,
        shortcut_maps: Optional[Mapping[str, Tuple[int, ...]]] = None,
    ) -> "ArchitectureSpec":
        """Copy of this spec with new site widths (and optionally stem width).

        Identity shortcuts whose widths end up unequal get a positional
        zero-fill routing unless ``shortcut_maps`` supplies one.
        """
        widths = self.site_widths()
        widths.update({k: int(v) for k, v in site_widths.items()})
        for s, v in widths.items():
            if v < 1:
                raise ValueError(f"site {s!r} would have {v} channels")
        stem_c = int(stem_width) if stem_width is not None else self.stem.c_out

        def width_of(site: Optional[str], fallback: int) -> int:
            return widths[site] if site is not None else fallback

        layers = []
        for i, lay in enumerate(self.layers):
            if i == 0:
                layers.append(replace(lay, c_out=stem_c))
                continue
            if lay.kind == "pool":
                c = layers[-1].c_out
                layers.append(replace(lay, c_in=c, c_out=c))
                continue
            c_in = width_of(lay.in_site, stem_c)
            if lay.kind == "dwconv":
                c_out = c_in
            elif lay.kind == "linear":
                c_out = lay.c_out
            else:
                c_out = width_of(lay.out_site, stem_c)
            layers.append(replace(lay, c_in=c_in, c_out=c_out))

        by_name = {lay.name: lay for lay in layers}
        blocks = []
        maps = dict(shortcut_maps or {})
        for b in self.blocks:
            smap = None
            if b.shortcut is None:
                cin, cout = by_name[b.conv1].c_in, by_name[b.conv2].c_out
                if b.name in maps:
                    smap = tuple(int(v) for v in maps[b.name]) if maps[b.name] is not None else None
                elif cin != cout:
                    smap = tuple(j if j < cin else -1 for j in range(cout))
            blocks.append(replace(b, shortcut_map=smap))
        spec = replace(
            self,
            layers=tuple(layers),
            blocks=tuple(blocks),
            sites=tuple((s, widths[s]) for s, _ in self.sites),
        )
        spec.validate()
        return spec

    # -- text serialization -----------------------------------------------------------
    def to_text(self) -> str:
        buf = io.StringIO()
        c, h, w = self.input_shape
        buf.write("# layer <name> <kind> <k> <c_in> <c_out> <stride> <h> <w> <in_site> <out_site>\n")
        buf.write(f"family {self.family}\n")
        buf.write(f"input {c} {h} {w}\n")
        buf.write(f"classes {self.num_classes}\n")
        for s, width in self.sites:
            buf.write(f"site {s} {width}\n")
        for lay in self.layers:
            buf.write(
                f"layer {lay.name} {lay.kind} {lay.k} {lay.c_in} {lay.c_out} {lay.stride} "
                f"{lay.h} {lay.w} {lay.in_site or '-'} {lay.out_site or '-'}\n"
            )
        for b in self.blocks:
            smap = "-" if b.shortcut_map is None else ",".join(str(v) for v in b.shortcut_map)
            buf.write(
                f"block {b.name} {b.conv1} {b.conv2} {b.shortcut or '-'} "
                f"{b.in_site or '-'} {b.mid_site} {b.out_site} {smap}\n"
            )
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        def opt(tok: str) -> Optional[str]:
            return None if tok == "-" else tok

        family, input_shape, classes = None, None, None
        sites, layers, blocks = [], [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            try:
                if tok[0] == "family":
                    family = tok[1]
                elif tok[0] == "input":
                    input_shape = tuple(int(t) for t in tok[1:4])
                elif tok[0] == "classes":
                    classes = int(tok[1])
                elif tok[0] == "site":
                    sites.append((tok[1], int(tok[2])))
                elif tok[0] == "layer":
                    name, kind = tok[1], tok[2]
                    k, cin, cout, stride, h, w = (int(t) for t in tok[3:9])
                    layers.append(LayerSpec(name, kind, k, cin, cout, stride, h, w, opt(tok[9]), opt(tok[10])))
                elif tok[0] == "block":
                    smap = None if tok[8] == "-" else tuple(int(v) for v in tok[8].split(","))
                    blocks.append(BlockSpec(tok[1], tok[2], tok[3], opt(tok[4]), opt(tok[5]), tok[6], tok[7], smap))
                else:
                    raise ValueError(f"unknown record {tok[0]!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}: {exc}") from None
        if family is None or input_shape is None or classes is None:
            raise ValueError("architecture text is missing family/input/classes")
        spec = cls(family, input_shape, classes, tuple(layers), tuple(blocks), tuple(sites))
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def resnet_spec(
    depth: int,
    widths: Sequence[int] = (16, 32, 64),
    num_classes: int = 10,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
) -> ArchitectureSpec:
    if depth < 8 or (depth - 2) % 6:
        raise ValueError(f"resnet depth must be 6n+2 with n >= 1, got {depth}")
    if len(widths) != 3:
        raise ValueError("resnet needs three stage widths")
    n_blocks = (depth - 2) // 6
    c0, h, w = input_shape
    layers = [LayerSpec("stem", "conv", 3, c0, widths[0], 1, h, w)]
    blocks = []
    sites = []
    prev_site: Optional[str] = None
    c_prev = widths[0]
    for stage, width in enumerate(widths, 1):
        for j in range(1, n_blocks + 1):
            stride = 2 if (stage > 1 and j == 1) else 1
            h, w = E.conv_output_size(h, 3, stride, 1), E.conv_output_size(w, 3, stride, 1)
            name = f"s{stage}b{j}"
            mid, out = f"{name}.a", f"{name}.b"
            sites += [(mid, width), (out, width)]
            layers.append(LayerSpec(f"{name}.conv1", "conv", 3, c_prev, width, stride, h, w, prev_site, mid))
            layers.append(LayerSpec(f"{name}.conv2", "conv", 3, width, width, 1, h, w, mid, out))
            shortcut = None
            if stride != 1 or c_prev != width:
                shortcut = f"{name}.short"
                layers.append(LayerSpec(shortcut, "conv", 1, c_prev, width, stride, h, w, prev_site, out))
            blocks.append(BlockSpec(name, f"{name}.conv1", f"{name}.conv2", shortcut, prev_site, mid, out))
            prev_site, c_prev = out, width
    layers.append(LayerSpec("pool", "pool", h, c_prev, c_prev, 1, 1, 1))
    layers.append(LayerSpec("fc", "linear", 1, c_prev, num_classes, 1, 1, 1, prev_site, None))
    spec = ArchitectureSpec("resnet", tuple(input_shape), num_classes, tuple(layers), tuple(blocks), tuple(sites))
    spec.validate()
    return spec


def mobilenet_spec(
    width_multiplier: float = 1.0,
    num_classes: int = 10,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    base: Sequence[Tuple[int, int]] = MOBILENET_BASE,
    stem_width: int = MOBILENET_STEM,
) -> ArchitectureSpec:
    if not 0 < width_multiplier <= 1:
        raise ValueError("width multiplier must lie in (0, 1]")

    def scale(c: int) -> int:
        # guard against 0.75 * 64 = 48.000000000000004 style round-up
        return max(1, math.ceil(round(width_multiplier * c, 9)))

    c0, h, w = input_shape
    c_prev = scale(stem_width)
    layers = [LayerSpec("stem", "conv", 3, c0, c_prev, 1, h, w)]
    sites = []
    prev_site: Optional[str] = None
    for i, (c_base, stride) in enumerate(base):
        h, w = E.conv_output_size(h, 3, stride, 1), E.conv_output_size(w, 3, stride, 1)
        layers.append(LayerSpec(f"dw{i}", "dwconv", 3, c_prev, c_prev, stride, h, w, prev_site, prev_site))
        c = scale(c_base)
        site = f"pw{i}"
        sites.append((site, c))
        layers.append(LayerSpec(f"pw{i}", "pwconv", 1, c_prev, c, 1, h, w, prev_site, site))
        c_prev, prev_site = c, site
    layers.append(LayerSpec("pool", "pool", h, c_prev, c_prev, 1, 1, 1))
    layers.append(LayerSpec("fc", "linear", 1, c_prev, num_classes, 1, 1, 1, prev_site, None))
    spec = ArchitectureSpec("mobilenet", tuple(input_shape), num_classes, tuple(layers), (), tuple(sites))
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# parameters and forward pass
# ---------------------------------------------------------------------------


def init_params(spec: ArchitectureSpec, rng: np.random.Generator, dtype=np.float32):
    """Kaiming fan-out conv init, unit BN scale, zero BN shift."""
    params: Dict[str, Parameter] = {}
    buffers: Dict[str, np.ndarray] = {}
    for lay in spec.layers:
        if lay.kind == "pool":
            continue
        if lay.kind == "linear":
            bound = 1.0 / math.sqrt(lay.c_in)
            params[f"{lay.name}.weight"] = Parameter(rng.uniform(-bound, bound, (lay.c_in, lay.c_out)).astype(dtype))
            params[f"{lay.name}.bias"] = Parameter(rng.uniform(-bound, bound, lay.c_out).astype(dtype))
            continue
        if lay.kind == "dwconv":
            shape = (lay.k, lay.k, 1, lay.c_out)
        else:
            shape = (lay.k, lay.k, lay.c_in, lay.c_out)
        std = math.sqrt(2.0 / (lay.k * lay.k * lay.c_out))
        params[f"{lay.name}.weight"] = Parameter(rng.normal(0.0, std, shape).astype(dtype))
        params[f"{lay.name}.bn.scale"] = Parameter(np.ones(lay.c_out, dtype=dtype))
        params[f"{lay.name}.bn.shift"] = Parameter(np.zeros(lay.c_out, dtype=dtype))
        buffers[f"{lay.name}.bn.mean"] = np.zeros(lay.c_out, dtype=np.float64)
        buffers[f"{lay.name}.bn.var"] = np.ones(lay.c_out, dtype=np.float64)
    for name, p in params.items():
        p.name = name
    return params, buffers


Masks = Mapping[str, Union[Tensor, np.ndarray]]


@dataclass
class Network:
    """A spec together with its weights and BN running statistics."""

    spec: ArchitectureSpec
    params: Dict[str, Parameter]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def copy(self) -> "Network":
        params = {k: Parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return Network(self.spec, params, {k: v.copy() for k, v in self.buffers.items()})

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward ---------------------------------------------------------------
    def _conv_bn(self, x: Tensor, lay: LayerSpec, train: bool) -> Tensor:
        y = E.conv2d(
            x,
            self.params[f"{lay.name}.weight"],
            stride=lay.stride,
            padding=lay.padding,
            depthwise=lay.kind == "dwconv",
            name=lay.name,
        )
        return E.batch_norm(
            y,
            self.params[f"{lay.name}.bn.scale"],
            self.params[f"{lay.name}.bn.shift"],
            self.buffers[f"{lay.name}.bn.mean"],
            self.buffers[f"{lay.name}.bn.var"],
            train,
        )

    def _mask(self, x: Tensor, site: Optional[str], masks: Optional[Masks]) -> Tensor:
        if site is None or masks is None or site not in masks:
            return x
        m = masks[site]
        if m.shape[0] != x.shape[1]:
            raise DimensionError(f"indicator site {site!r}: {m.shape[0]} entries for {x.shape[1]} channels")
        return E.channel_mask(x, m)

    def _head(self, x: Tensor) -> Tensor:
        x = E.global_avg_pool(x)
        return E.linear(x, self.params["fc.weight"], self.params["fc.bias"])

    def forward(self, x, masks: Optional[Masks] = None, train: bool = False) -> Tensor:
        """Logits for a batch ``x`` of shape ``(N, C, H, W)``.

        ``masks`` maps site names to length-c multipliers (relaxed tensors
        or hard 0/1 arrays) applied after each masked layer's
        conv -> BN -> ReLU (after the residual addition for ``.b`` sites).
        """
        x = E.as_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"input shape {x.shape[1:]} != {self.spec.input_shape}")
        if masks is not None:
            unknown = set(masks) - set(self.spec.site_widths())
            if unknown:
                raise DimensionError(f"unknown indicator sites {sorted(unknown)}")
        if self.spec.family == "resnet":
            return self._forward_resnet(x, masks, train)
        return self._forward_sequential(x, masks, train)

    __call__ = forward

    def _forward_resnet(self, x: Tensor, masks, train: bool) -> Tensor:
        spec = self.spec
        stem = spec.stem
        h = E.relu(self._conv_bn(x, stem, train))
        for b in spec.blocks:
            inp = h
            c1, c2 = spec.layer(b.conv1), spec.layer(b.conv2)
            y = self._mask(E.relu(self._conv_bn(inp, c1, train)), b.mid_site, masks)
            y = self._conv_bn(y, c2, train)
            if b.shortcut is not None:
                sc = self._conv_bn(inp, spec.layer(b.shortcut), train)
            elif b.shortcut_map is not None:
                sc = E.channel_gather(inp, np.asarray(b.shortcut_map))
            else:
                sc = inp
            h = self._mask(E.relu(y + sc), b.out_site, masks)
        return self._head(h)

    def _forward_sequential(self, x: Tensor, masks, train: bool) -> Tensor:
        h = x
        for lay in self.spec.layers:
            if lay.kind == "pool":
                break
            h = self._mask(E.relu(self._conv_bn(h, lay, train)), lay.out_site, masks)
        return self._head(h)


def build_network(spec: ArchitectureSpec, rng: np.random.Generator) -> Network:
    params, buffers = init_params(spec, rng)
    return Network(spec, params, buffers)


def build_resnet(
    depth: int,
    widths: Sequence[int] = (16, 32, 64),
    num_classes: int = 10,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    rng: Optional[np.random.Generator] = None,
) -> Network:
    rng = rng if rng is not None else np.random.default_rng(0)
    return build_network(resnet_spec(depth, widths, num_classes, input_shape), rng)


def build_mobilenet(
    width_multiplier: float = 1.0,
    num_classes: int = 10,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    base: Sequence[Tuple[int, int]] = MOBILENET_BASE,
    stem_width: int = MOBILENET_STEM,
    rng: Optional[np.random.Generator] = None,
) -> Network:
    rng = rng if rng is not None else np.random.default_rng(0)
    return build_network(mobilenet_spec(width_multiplier, num_classes, input_shape, base, stem_width), rng)


def forward_masked(net: Network, indicators, x, train: bool = False) -> Tensor:
    """Supernet forward with every site masked by its relaxed indicator."""
    widths = net.spec.site_widths()
    for site, alpha in indicators.alphas.items():
        if site not in widths:
            raise DimensionError(f"indicator site {site!r} not in architecture")
        if alpha.shape[0] != widths[site]:
            raise DimensionError(f"indicator site {site!r}: {alpha.shape[0]} entries, layer has {widths[site]} channels")
    return net.forward(x, indicators.relaxed_all(), train=train)

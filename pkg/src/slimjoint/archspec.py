"""Layer graphs, tied width multipliers, and exact FLOPs / memory cost models.

An :class:`ArchSpec` is a topologically ordered list of :class:`LayerSpec`
plus a partition of the width-controllable layers into tie groups.  A width
configuration is a vector with one multiplier per tie group; resolving it
gives integer channel counts for every layer.

FLOPs are counted as multiply-accumulates (MACs).  Memory is the peak
per-layer sum of input feature map, output feature map, weights and live
skip tensors, in scalar elements, at batch size 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

KINDS = ("conv", "dense", "add", "global-pool", "classifier-dense")
WEIGHTED = ("conv", "dense", "classifier-dense")
INPUT = -1  # source id of the network input

# guards ceil() against products like 0.3 * 10 = 3.0000000000000004
_ROUND_SLACK = 1e-9


class ArchError(ValueError):
    """Malformed architecture spec."""


class WidthError(ValueError):
    """Width configuration incompatible with a spec."""


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    in_channels_base: int
    out_channels_base: int
    kernel_w: int = 1
    kernel_h: int = 1
    stride: int = 1
    groups: int = 1
    input_sources: tuple[int, ...] = (INPUT,)
    activation: str = "none"
    # filled in by ArchSpec from the input resolution
    spatial_in_w: int = 1
    spatial_in_h: int = 1
    spatial_out_w: int = 1
    spatial_out_h: int = 1

    @property
    def depthwise(self) -> bool:
        return (
            self.kind == "conv"
            and self.groups > 1
            and self.groups == self.in_channels_base == self.out_channels_base
        )

    @property
    def controllable(self) -> bool:
        return self.kind in ("conv", "dense")


@dataclass(frozen=True)
class ConcreteLayer:
    id: int
    kind: str
    c_in: int
    c_out: int
    groups: int
    kernel_w: int
    kernel_h: int
    stride: int
    in_w: int
    in_h: int
    out_w: int
    out_h: int


@dataclass(frozen=True)
class CostReport:
    flops: int
    memory_elements: int
    per_layer_flops: tuple[int, ...]
    per_layer_memory: tuple[int, ...]


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    tie_groups: tuple[tuple[int, ...], ...]
    input_resolution: tuple[int, int, int]  # (width, height, channels)
    w0: float
    rounding: str = "ceil"  # or "floor"; both keep at least one channel

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "tie_groups", tuple(tuple(int(i) for i in g) for g in self.tie_groups)
        )
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        if not 0.0 < self.w0 <= 1.0:
            raise ArchError(f"w0 must lie in (0, 1], got {self.w0}")
        if self.rounding not in ("ceil", "floor"):
            raise ArchError(f"unknown rounding mode {self.rounding!r}")
        object.__setattr__(self, "layers", _resolve_spatial(self.layers, self.input_resolution))
        self._validate()

    # -- structure -----------------------------------------------------------------

    @property
    def d(self) -> int:
        return len(self.tie_groups)

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_channels_base

    @cached_property
    def _resolved(self) -> dict:
        return {}

    @cached_property
    def group_of(self) -> dict[int, int]:
        return {lid: g for g, members in enumerate(self.tie_groups) for lid in members}

    @cached_property
    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {INPUT: []}
        for layer in self.layers:
            out[layer.id] = []
        for layer in self.layers:
            for src in layer.input_sources:
                out[src].append(layer.id)
        return out

    def _channel_source(self, lid: int):
        """(group, base) driving the output channels of ``lid``; ('fixed', n) otherwise."""
        if lid == INPUT:
            return ("fixed", self.input_resolution[2])
        layer = self.layers[lid]
        if layer.controllable:
            return (self.group_of[lid], layer.out_channels_base)
        if layer.kind in ("add", "global-pool"):
            return self._channel_source(layer.input_sources[0])
        return ("fixed", layer.out_channels_base)

    def _validate(self):
        seen = set()
        for pos, layer in enumerate(self.layers):
            if layer.id != pos:
                raise ArchError(f"layer ids must equal their position; got {layer.id} at {pos}")
            if layer.kind not in KINDS:
                raise ArchError(f"layer {pos}: unknown kind {layer.kind!r}")
            if any(src >= pos or src < INPUT for src in layer.input_sources):
                raise ArchError(f"layer {pos}: sources must precede it (topological order)")
            if layer.activation not in ("none", "relu"):
                raise ArchError(f"layer {pos}: unknown activation {layer.activation!r}")
            if layer.kind == "add" and len(layer.input_sources) != 2:
                raise ArchError(f"add layer {pos} needs exactly two sources")
            if layer.kind != "add" and len(layer.input_sources) != 1:
                raise ArchError(f"layer {pos} ({layer.kind}) needs exactly one source")
        for members in self.tie_groups:
            if not members:
                raise ArchError("empty tie group")
            for lid in members:
                if lid in seen:
                    raise ArchError(f"layer {lid} appears in more than one tie group")
                if not 0 <= lid < len(self.layers) or not self.layers[lid].controllable:
                    raise ArchError(f"tie group member {lid} is not a width-controllable layer")
                seen.add(lid)
        for layer in self.layers:
            if layer.controllable and layer.id not in seen:
                raise ArchError(f"controllable layer {layer.id} belongs to no tie group")
        if self.layers[-1].kind != "classifier-dense":
            raise ArchError("last layer must be a classifier-dense layer")
        for layer in self.layers:
            src = self._channel_source(layer.input_sources[0])
            if layer.kind == "add":
                other = self._channel_source(layer.input_sources[1])
                if src != other:
                    raise ArchError(
                        f"add layer {layer.id}: sources resolve to different channel "
                        f"drivers {src} vs {other}; tie them into one group"
                    )
                a, b = (self.layers[s] if s != INPUT else None for s in layer.input_sources)
                sa = (a.spatial_out_w, a.spatial_out_h) if a else self.input_resolution[:2]
                sb = (b.spatial_out_w, b.spatial_out_h) if b else self.input_resolution[:2]
                if sa != sb:
                    raise ArchError(f"add layer {layer.id}: spatial sizes differ {sa} vs {sb}")
            if layer.depthwise and self._channel_source(layer.id) != src:
                raise ArchError(
                    f"depthwise layer {layer.id} must share the tie group of its input"
                )
        # a quick resolvability check at both corners catches group divisibility errors
        resolve_channels(self, np.full(self.d, self.w0))
        resolve_channels(self, np.ones(self.d))

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        keep = (
            "id", "kind", "in_channels_base", "out_channels_base", "kernel_w",
            "kernel_h", "stride", "groups", "input_sources", "activation",
        )
        return {
            "name": self.name,
            "input_resolution": list(self.input_resolution),
            "w0": self.w0,
            "rounding": self.rounding,
            "tie_groups": [list(g) for g in self.tie_groups],
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(layer).items() if k in keep}
                for layer in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchSpec":
        try:
            layers = [
                LayerSpec(**{**layer, "input_sources": tuple(layer.get("input_sources", [INPUT]))})
                for layer in doc["layers"]
            ]
            return cls(
                name=doc["name"],
                layers=tuple(layers),
                tie_groups=doc["tie_groups"],
                input_resolution=tuple(doc["input_resolution"]),
                w0=float(doc["w0"]),
                rounding=doc.get("rounding", "ceil"),
            )
        except (KeyError, TypeError) as exc:
            raise ArchError(f"malformed architecture document: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))


def _resolve_spatial(layers, input_resolution):
    shapes = {INPUT: (input_resolution[0], input_resolution[1])}
    out = []
    for layer in layers:
        src = layer.input_sources[0]
        if src not in shapes:
            raise ArchError(f"layer {layer.id}: source {src} not defined before use")
        w_in, h_in = shapes[src]
        if layer.kind == "conv":
            w_out = (w_in + layer.stride - 1) // layer.stride
            h_out = (h_in + layer.stride - 1) // layer.stride
        elif layer.kind == "add":
            w_out, h_out = w_in, h_in
        else:  # dense, global-pool and classifier collapse to a vector
            w_out = h_out = 1
        layer = LayerSpec(
            **{**asdict(layer), "input_sources": tuple(layer.input_sources),
               "spatial_in_w": w_in, "spatial_in_h": h_in,
               "spatial_out_w": w_out, "spatial_out_h": h_out}
        )
        shapes[layer.id] = (w_out, h_out)
        out.append(layer)
    return tuple(out)


# -- resolution and cost ---------------------------------------------------------------


def check_width(spec: ArchSpec, width) -> np.ndarray:
    a = np.asarray(width, dtype=float)
    if a.shape != (spec.d,):
        raise WidthError(f"width has shape {a.shape}, spec {spec.name!r} needs ({spec.d},)")
    if not np.all(np.isfinite(a)) or np.any(a < spec.w0) or np.any(a > 1.0):
        raise WidthError(f"width components must lie in [{spec.w0}, 1]; got {a.tolist()}")
    return a


def scaled_channels(multiplier: float, base: int, rounding: str = "ceil") -> int:
    if rounding == "floor":
        return max(1, math.floor(multiplier * base + _ROUND_SLACK))
    return max(1, math.ceil(multiplier * base - _ROUND_SLACK))


_CACHE_LIMIT = 8192


def resolve_channels(spec: ArchSpec, width) -> tuple[ConcreteLayer, ...]:
    """Integer channel counts of every layer at ``width``."""
    a = check_width(spec, width)
    key = a.tobytes()
    cache = spec._resolved
    hit = cache.get(key)
    if hit is not None:
        return hit
    if len(cache) >= _CACHE_LIMIT:
        cache.clear()
    cache[key] = out = _resolve(spec, a)
    return out


def _resolve(spec: ArchSpec, a: np.ndarray) -> tuple[ConcreteLayer, ...]:
    group_of = spec.group_of
    c_out_of = {INPUT: spec.input_resolution[2]}
    out = []
    for layer in spec.layers:
        c_in = c_out_of[layer.input_sources[0]]
        if layer.controllable:
            c_out = scaled_channels(a[group_of[layer.id]], layer.out_channels_base, spec.rounding)
        elif layer.kind in ("add", "global-pool"):
            c_out = c_in
        else:
            c_out = layer.out_channels_base
        if layer.depthwise:
            groups = c_in
        else:
            groups = layer.groups
            if c_in % groups or c_out % groups:
                raise WidthError(
                    f"layer {layer.id}: groups={groups} does not divide channels "
                    f"{c_in}->{c_out} at width {a.tolist()}"
                )
        c_out_of[layer.id] = c_out
        out.append(
            ConcreteLayer(
                layer.id, layer.kind, c_in, c_out, groups, layer.kernel_w, layer.kernel_h,
                layer.stride, layer.spatial_in_w, layer.spatial_in_h,
                layer.spatial_out_w, layer.spatial_out_h,
            )
        )
    return tuple(out)


def _layer_flops(cl: ConcreteLayer) -> int:
    if cl.kind not in WEIGHTED:
        return 0
    return cl.kernel_w * cl.kernel_h * cl.c_in * cl.c_out * cl.out_w * cl.out_h // cl.groups


def _layer_weights(cl: ConcreteLayer) -> int:
    if cl.kind not in WEIGHTED:
        return 0
    return cl.kernel_w * cl.kernel_h * cl.c_in * cl.c_out // cl.groups


def _memory_terms(spec: ArchSpec, concrete: Sequence[ConcreteLayer]) -> list[int]:
    c_of = {INPUT: spec.input_resolution[2]}
    for cl in concrete:
        c_of[cl.id] = cl.c_out
    last_use = {t: max(users) for t, users in spec.consumers.items() if users}
    terms = []
    for layer, cl in zip(spec.layers, concrete):
        primary = layer.input_sources[0]
        fm_in = cl.in_w * cl.in_h * cl.c_in
        fm_out = cl.out_w * cl.out_h * cl.c_out
        skip_c = sum(
            c_of[t]
            for t, last in last_use.items()
            if t < layer.id and t != primary and last >= layer.id
        )
        terms.append(fm_in + fm_out + _layer_weights(cl) + cl.out_w * cl.out_h * skip_c)
    return terms


def count_flops(spec: ArchSpec, width) -> int:
    return sum(_layer_flops(cl) for cl in resolve_channels(spec, width))


def count_memory(spec: ArchSpec, width) -> int:
    return max(_memory_terms(spec, resolve_channels(spec, width)))


def cost_report(spec: ArchSpec, width) -> CostReport:
    concrete = resolve_channels(spec, width)
    flops = tuple(_layer_flops(cl) for cl in concrete)
    mem = tuple(_memory_terms(spec, concrete))
    return CostReport(sum(flops), max(mem), flops, mem)


def cost_function(spec: ArchSpec, objective: str = "flops"):
    """Return ``width -> cost`` for the named objective ('flops' or 'memory')."""
    if objective == "flops":
        return lambda width: count_flops(spec, width)
    if objective == "memory":
        return lambda width: count_memory(spec, width)
    raise ValueError(f"unknown cost objective {objective!r}")


# -- built-in specs -------------------------------------------------------------------


@dataclass
class _Builder:
    layers: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    channels: dict = field(default_factory=dict)

    def add(self, kind, src, out_ch, group=None, *, k=1, stride=1, dw=False, relu=False,
            in_ch=None, other=None):
        lid = len(self.layers)
        if in_ch is None:
            in_ch = self.channels[src]
        sources = (src,) if other is None else (src, other)
        self.layers.append(
            LayerSpec(
                id=lid, kind=kind, in_channels_base=in_ch, out_channels_base=out_ch,
                kernel_w=k, kernel_h=k, stride=stride, groups=in_ch if dw else 1,
                input_sources=sources, activation="relu" if relu else "none",
            )
        )
        self.channels[lid] = out_ch
        if group is not None:
            self.groups.setdefault(group, []).append(lid)
        return lid

    def tie_groups(self, order):
        return [self.groups[g] for g in order]


def tiny_mlp(in_features: int = 2, num_classes: int = 3, hidden: int = 64) -> ArchSpec:
    b = _Builder()
    b.channels[INPUT] = in_features
    x = INPUT
    for g in range(3):
        x = b.add("dense", x, hidden, g, relu=True)
    b.add("classifier-dense", x, num_classes)
    return ArchSpec("tiny-mlp", tuple(b.layers), b.tie_groups(range(3)), (1, 1, in_features), 0.25)


def tiny_resnet(input_resolution=(1, 1, 2), num_classes: int = 3, base: int = 8) -> ArchSpec:
    """Three-stage residual net with ResNet-CIFAR tying (two multipliers per stage).

    Per stage one multiplier drives the residual-connected outputs and one the
    block-internal convolutions.  Kernels are 3x3 on spatial inputs and 1x1
    when the input is a single point (feature vectors reshaped to 1x1xC).
    """
    w, h, c = input_resolution
    k = 1 if w == h == 1 else 3
    b = _Builder()
    b.channels[INPUT] = c
    x = b.add("conv", INPUT, base, "s1.res", k=k, relu=True)
    for stage, (ch, stride) in enumerate([(base, 1), (2 * base, 2), (4 * base, 2)], start=1):
        res, inner = f"s{stage}.res", f"s{stage}.inner"
        y = b.add("conv", x, ch, inner, k=k, stride=stride, relu=True)
        y = b.add("conv", y, ch, res, k=k)
        if stride != 1 or b.channels[x] != ch:
            x = b.add("conv", x, ch, res, k=1, stride=stride)
        x = b.add("add", y, ch, in_ch=ch, other=x, relu=True)
    x = b.add("global-pool", x, b.channels[x])
    b.add("classifier-dense", x, num_classes)
    order = [f"s{s}.{kind}" for s in (1, 2, 3) for kind in ("res", "inner")]
    return ArchSpec("tiny-resnet", tuple(b.layers), b.tie_groups(order), (w, h, c), 0.316)


# (expansion t, output channels c, repeats n, first stride s)
_MBV2_BLOCKS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def mobilenetv2_cost(resolution: int = 224, num_classes: int = 1000) -> ArchSpec:
    """Full MobileNetV2 graph for cost-model use: 52 convs, 25 tie groups.

    Channel counts are truncated (``int(a * c)``, at least 1) rather than
    rounded up; under truncation the uniform 0.42x model lands at ~59.6M MACs,
    the published figure for this network.
    """
    b = _Builder()
    b.channels[INPUT] = 3
    x = b.add("conv", INPUT, 32, "stem", k=3, stride=2, relu=True)
    order = ["stem"]
    prev_group = "stem"
    block = 0
    for stage, (t, c, n, s) in enumerate(_MBV2_BLOCKS):
        out_group = f"stage{stage}.out"
        order.append(out_group)
        for i in range(n):
            stride = s if i == 0 else 1
            inp = x
            if t != 1:
                block += 1
                prev_group = f"block{block}.expand"
                order.append(prev_group)
                x = b.add("conv", x, b.channels[x] * t, prev_group, relu=True)
            x = b.add("conv", x, b.channels[x], prev_group, k=3, stride=stride, dw=True, relu=True)
            x = b.add("conv", x, c, out_group)
            if stride == 1 and b.channels[inp] == c:
                x = b.add("add", x, c, in_ch=c, other=inp)
        prev_group = out_group
    x = b.add("conv", x, 1280, "head", relu=True)
    order.append("head")
    x = b.add("global-pool", x, 1280)
    b.add("classifier-dense", x, num_classes)
    return ArchSpec("mobilenetv2-cost", tuple(b.layers), b.tie_groups(order),
                    (resolution, resolution, 3), 0.42, rounding="floor")


BUILTIN = {"tiny-mlp": tiny_mlp, "tiny-resnet": tiny_resnet, "mobilenetv2-cost": mobilenetv2_cost}


def builtin_specs(name: str, **kwargs) -> ArchSpec:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise ArchError(f"unknown built-in spec {name!r}; choose from {sorted(BUILTIN)}") from None
    return factory(**kwargs)

"""Typed graph description of CNN architectures, before and after Multi-Narrow rewriting.

An :class:`ArchGraph` is an ordered list of :class:`LayerSpec` entries. Order is
topological: every predecessor appears before the layers that consume it.
Channel counts on a layer are *totals* over all paths; ``groups`` records how
those channels are partitioned.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

GRAPH_FORMAT = "mnlab-graph"
GRAPH_VERSION = 1


class GraphError(ValueError):
    """Raised when a graph violates a structural invariant."""


class LayerKind(str, enum.Enum):
    INPUT = "Input"
    CONV2D = "Conv2d"
    DEPTHWISE = "DepthwiseConv2d"
    DENSE = "Dense"
    NORM = "Norm"
    RELU = "ReLU"
    POOL = "Pool"
    GLOBAL_POOL = "GlobalPool"
    ADD = "Add"
    CLASSIFIER = "ClassifierHead"
    AGGREGATE = "Aggregate"


class Position(str, enum.Enum):
    INPUT_FACING = "InputFacing"
    INTERMEDIATE = "Intermediate"
    OUTPUT_FACING = "OutputFacing"


class PreservationClass(str, enum.Enum):
    DENSE_COUPLING = "DenseCoupling"
    ONE_SIDED_FIXED = "OneSidedFixed"
    DEPTHWISE = "Depthwise"
    PER_CHANNEL = "PerChannel"
    PARAMETER_FREE = "ParameterFree"


CONV_KINDS = (LayerKind.CONV2D, LayerKind.DEPTHWISE)
WEIGHTED_KINDS = (LayerKind.CONV2D, LayerKind.DEPTHWISE, LayerKind.DENSE, LayerKind.CLASSIFIER)
# kinds whose channels must never be mixed across paths in an MN graph
PATH_SEPARATED_KINDS = (
    LayerKind.CONV2D,
    LayerKind.DEPTHWISE,
    LayerKind.DENSE,
    LayerKind.NORM,
    LayerKind.CLASSIFIER,
)


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int = 0
    groups: int = 1
    stride: int = 1
    has_bias: bool = False
    predecessors: tuple[str, ...] = ()
    # stage index for channel-law bookkeeping; -1 means "not part of a stage"
    stage: int = -1
    # input-facing convs of MN graphs see the shared input tiled this many times
    replicate_input: int = 1
    # Norm only: "channel" keeps one statistic per channel, "group" one per group
    norm_stats: str = "channel"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["predecessors"] = list(self.predecessors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["kind"] = LayerKind(d["kind"])
        d["predecessors"] = tuple(d.get("predecessors", ()))
        return cls(**d)


@dataclass(frozen=True)
class ArchGraph:
    layers: tuple[LayerSpec, ...]
    path_multiplicity: int = 1
    width_divisor: int = 1
    stage_widths: tuple[int, ...] = ()
    name: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "_index", {l.id: l for l in self.layers})

    @property
    def r(self) -> int:
        return self.width_divisor

    @property
    def M(self) -> int:
        return self.path_multiplicity

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self._index[layer_id]
        except KeyError:
            raise GraphError(f"no layer named {layer_id!r}") from None

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    @property
    def input_layer(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind is LayerKind.INPUT)

    @property
    def sink(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def classifier(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind is LayerKind.CLASSIFIER)

    @property
    def input_channels(self) -> int:
        return self.input_layer.out_channels

    @property
    def num_classes(self) -> int:
        return self.classifier.out_channels // self.path_multiplicity

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for p in l.predecessors:
                succ[p].append(l.id)
        return succ

    def position(self, layer: LayerSpec) -> Position:
        if layer.kind is LayerKind.CLASSIFIER:
            return Position.OUTPUT_FACING
        if any(self.layer(p).kind is LayerKind.INPUT for p in layer.predecessors):
            return Position.INPUT_FACING
        return Position.INTERMEDIATE

    def layers_of(self, *kinds: LayerKind) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in kinds]

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "name": self.name,
            "r": self.width_divisor,
            "M": self.path_multiplicity,
            "stage_widths": list(self.stage_widths),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchGraph":
        if d.get("format", GRAPH_FORMAT) != GRAPH_FORMAT:
            raise GraphError(f"not a graph document (format={d.get('format')!r})")
        if d.get("version", GRAPH_VERSION) != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {d.get('version')}")
        g = cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            path_multiplicity=int(d["M"]),
            width_divisor=int(d["r"]),
            stage_widths=tuple(d.get("stage_widths", ())),
            name=d.get("name", ""),
        )
        validate(g)
        return g

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ArchGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ArchGraph":
        return cls.from_json(Path(path).read_text())


def validate(g: ArchGraph) -> ArchGraph:
    """Check structural invariants; return ``g`` unchanged or raise :class:`GraphError`."""
    seen: dict[str, LayerSpec] = {}
    for l in g.layers:
        if l.id in seen:
            raise GraphError(f"duplicate layer id {l.id!r}")
        for p in l.predecessors:
            if p not in seen:
                raise GraphError(f"layer {l.id!r}: predecessor {p!r} missing or not earlier in order")
        _check_layer(l, [seen[p] for p in l.predecessors], g.path_multiplicity)
        seen[l.id] = l

    inputs = [l for l in g.layers if l.kind is LayerKind.INPUT]
    if len(inputs) != 1:
        raise GraphError(f"graph must have exactly one Input layer, found {len(inputs)}")
    succ = g.successors()
    sinks = [lid for lid, s in succ.items() if not s]
    if len(sinks) != 1:
        raise GraphError(f"graph must have exactly one sink, found {sinks}")
    sink = g.layer(sinks[0])
    if sink.kind not in (LayerKind.AGGREGATE, LayerKind.CLASSIFIER):
        raise GraphError(f"sink {sink.id!r} must be Aggregate or ClassifierHead, not {sink.kind.value}")
    if sink is not g.layers[-1]:
        raise GraphError("sink must be the last layer in order")
    if len(g.layers_of(LayerKind.CLASSIFIER)) != 1:
        raise GraphError("graph must have exactly one ClassifierHead")

    reached = {inputs[0].id}
    queue = deque([inputs[0].id])
    while queue:
        for nxt in succ[queue.popleft()]:
            if nxt not in reached:
                reached.add(nxt)
                queue.append(nxt)
    unreachable = [l.id for l in g.layers if l.id not in reached]
    if unreachable:
        raise GraphError(f"layers not reachable from Input: {unreachable}")

    r, M = g.width_divisor, g.path_multiplicity
    if r < 1 or M != r * r:
        raise GraphError(f"path multiplicity M={M} must equal r^2 for r={r}")
    if M > 1:
        if sink.kind is not LayerKind.AGGREGATE:
            raise GraphError("an MN graph must end in an Aggregate node")
        for l in g.layers:
            if l.kind in PATH_SEPARATED_KINDS and l.groups % M:
                raise GraphError(
                    f"layer {l.id!r}: groups={l.groups} is not a multiple of M={M}; "
                    "channels would mix across paths"
                )
    return g


def _check_layer(l: LayerSpec, preds: list[LayerSpec], M: int) -> None:
    k = l.kind
    if l.in_channels < 1 or l.out_channels < 1 or l.groups < 1 or l.stride < 1:
        raise GraphError(f"layer {l.id!r}: channel, group and stride values must be positive")
    if k is LayerKind.INPUT:
        if preds:
            raise GraphError("Input layer cannot have predecessors")
        return
    if not preds:
        raise GraphError(f"layer {l.id!r} has no predecessors")
    if k is LayerKind.ADD:
        if len(preds) < 2:
            raise GraphError(f"Add layer {l.id!r} needs at least two inputs")
        if any(p.out_channels != l.in_channels for p in preds):
            raise GraphError(f"Add layer {l.id!r}: inputs have mismatched channel counts")
    else:
        if len(preds) != 1:
            raise GraphError(f"layer {l.id!r} ({k.value}) takes exactly one input")
        if preds[0].out_channels * l.replicate_input != l.in_channels:
            raise GraphError(
                f"layer {l.id!r}: in_channels={l.in_channels} does not match "
                f"{preds[0].id!r} out_channels={preds[0].out_channels} x replicate {l.replicate_input}"
            )
    if l.replicate_input != 1 and l.kind is not LayerKind.CONV2D:
        raise GraphError(f"layer {l.id!r}: only Conv2d may replicate its input")
    if k in CONV_KINDS and l.kernel < 1:
        raise GraphError(f"layer {l.id!r}: conv kernel must be >= 1")
    if k in (LayerKind.CONV2D, LayerKind.DENSE, LayerKind.CLASSIFIER):
        if l.in_channels % l.groups or l.out_channels % l.groups:
            raise GraphError(
                f"layer {l.id!r}: C_in={l.in_channels}, C_out={l.out_channels} not divisible by groups={l.groups}"
            )
    elif k is LayerKind.DEPTHWISE:
        if not (l.groups == l.in_channels == l.out_channels):
            raise GraphError(f"depthwise layer {l.id!r} needs groups == C_in == C_out")
    elif k is LayerKind.AGGREGATE:
        if preds[0].kind is not LayerKind.CLASSIFIER or l.groups != M:
            raise GraphError(f"Aggregate {l.id!r} must consume the grouped ClassifierHead carrying M={M} paths")
        if l.in_channels != l.out_channels * M:
            raise GraphError(f"Aggregate {l.id!r}: in_channels must be M * out_channels")
    elif k in (LayerKind.NORM, LayerKind.RELU, LayerKind.POOL, LayerKind.GLOBAL_POOL, LayerKind.ADD):
        if l.in_channels != l.out_channels:
            raise GraphError(f"layer {l.id!r}: {k.value} must keep channel count")
        if l.in_channels % l.groups:
            raise GraphError(f"layer {l.id!r}: channels not divisible by groups")
        if k is LayerKind.NORM and l.norm_stats not in ("channel", "group"):
            raise GraphError(f"Norm {l.id!r}: unknown norm_stats {l.norm_stats!r}")


def classify_layer(layer: LayerSpec, position: Position) -> PreservationClass:
    """Which parameter-preservation rule governs ``layer`` under MN rewriting."""
    k = layer.kind
    if not isinstance(k, LayerKind):
        raise GraphError(f"cannot classify layer kind {k!r}")
    if k is LayerKind.DEPTHWISE:
        return PreservationClass.DEPTHWISE
    if k is LayerKind.CLASSIFIER:
        return PreservationClass.ONE_SIDED_FIXED
    if k in (LayerKind.CONV2D, LayerKind.DENSE):
        if position is Position.INTERMEDIATE:
            return PreservationClass.DENSE_COUPLING
        return PreservationClass.ONE_SIDED_FIXED
    if k is LayerKind.NORM:
        return PreservationClass.PER_CHANNEL
    return PreservationClass.PARAMETER_FREE


def classify(g: ArchGraph, layer: LayerSpec | str) -> PreservationClass:
    if isinstance(layer, str):
        layer = g.layer(layer)
    return classify_layer(layer, g.position(layer))


# ---------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, input_channels: int):
        self.layers: list[LayerSpec] = [
            LayerSpec("input", LayerKind.INPUT, input_channels, input_channels)
        ]

    @property
    def last(self) -> LayerSpec:
        return self.layers[-1]

    def add(self, lid, kind, out_channels=None, *, src=None, stage=-1, **kw) -> str:
        srcs = [src] if isinstance(src, str) else list(src or [self.last.id])
        in_ch = next(l for l in self.layers if l.id == srcs[0]).out_channels
        if out_channels is None:
            out_channels = in_ch
        self.layers.append(
            LayerSpec(lid, kind, in_ch, out_channels, predecessors=tuple(srcs), stage=stage, **kw)
        )
        return lid

    def conv_norm(self, prefix, out, kernel, stride, stage, src=None, relu=True) -> str:
        self.add(f"{prefix}.conv", LayerKind.CONV2D, out, src=src, stage=stage, kernel=kernel, stride=stride)
        last = self.add(f"{prefix}.norm", LayerKind.NORM, stage=stage)
        if relu:
            last = self.add(f"{prefix}.relu", LayerKind.RELU, stage=stage)
        return last

    def head(self, num_classes: int):
        self.add("pool", LayerKind.GLOBAL_POOL)
        self.add("head", LayerKind.CLASSIFIER, num_classes, has_bias=True)


def build_resnet18(
    num_classes: int = 100,
    input_channels: int = 3,
    base_width: int = 64,
    blocks: Sequence[int] = (2, 2, 2, 2),
) -> ArchGraph:
    """ResNet-18 in its 32x32-input form: 3x3 stem, no max-pool, four stages of basic blocks.

    ``base_width`` and ``blocks`` allow reduced variants for desk-scale runs; the
    defaults give the standard 64/128/256/512 layout.
    """
    if num_classes < 2 or input_channels < 1:
        raise GraphError("need num_classes >= 2 and input_channels >= 1")
    widths = [base_width * m for m in (1, 2, 4, 8)][: len(blocks)]
    b = _Builder(input_channels)
    x = b.conv_norm("stem", base_width, 3, 1, stage=0)
    cin = base_width
    for s, (w, n) in enumerate(zip(widths, blocks), start=1):
        for i in range(n):
            stride = 2 if (i == 0 and s > 1) else 1
            p = f"s{s}.b{i + 1}"
            b.conv_norm(f"{p}.c1", w, 3, stride, stage=s, src=x)
            y = b.conv_norm(f"{p}.c2", w, 3, 1, stage=s, relu=False)
            if stride != 1 or cin != w:
                shortcut = b.conv_norm(f"{p}.down", w, 1, stride, stage=s, src=x, relu=False)
            else:
                shortcut = x
            b.add(f"{p}.add", LayerKind.ADD, src=[y, shortcut], stage=s)
            x = b.add(f"{p}.relu", LayerKind.RELU, stage=s)
            cin = w
    b.head(num_classes)
    g = ArchGraph(tuple(b.layers), stage_widths=(base_width, *widths), name="resnet18")
    return validate(g)


def build_micro_cnn(widths: Iterable[int], num_classes: int, input_channels: int = 3) -> ArchGraph:
    """conv3x3 -> norm -> ReLU per stage, 2x2 max-pool between stages, global pool, classifier."""
    widths = list(widths)
    if not widths or any(w < 1 for w in widths):
        raise GraphError("widths must be a nonempty list of positive ints")
    b = _Builder(input_channels)
    for s, w in enumerate(widths):
        b.conv_norm(f"s{s}", w, 3, 1, stage=s)
        if s < len(widths) - 1:
            b.add(f"s{s}.pool", LayerKind.POOL, stage=s, kernel=2, stride=2)
    b.head(num_classes)
    return validate(ArchGraph(tuple(b.layers), stage_widths=tuple(widths), name="micro_cnn"))


def build_separable_cnn(widths: Iterable[int], num_classes: int, input_channels: int = 3) -> ArchGraph:
    """Small depthwise-separable stack: a dense stem, then depthwise 3x3 + pointwise 1x1 per stage.

    Stage 0 is the stem; stage ``s >= 1`` runs the depthwise conv at the previous
    width (stride 2) and the pointwise conv up to ``widths[s]``.
    """
    widths = list(widths)
    if len(widths) < 2:
        raise GraphError("separable cnn needs a stem width and at least one stage width")
    b = _Builder(input_channels)
    b.conv_norm("stem", widths[0], 3, 1, stage=0)
    for s in range(1, len(widths)):
        prev = widths[s - 1]
        b.add(f"s{s}.dw", LayerKind.DEPTHWISE, prev, stage=s - 1, kernel=3, stride=2, groups=prev)
        b.add(f"s{s}.dw_norm", LayerKind.NORM, stage=s - 1)
        b.add(f"s{s}.dw_relu", LayerKind.RELU, stage=s - 1)
        b.conv_norm(f"s{s}.pw", widths[s], 1, 1, stage=s)
    b.head(num_classes)
    return validate(ArchGraph(tuple(b.layers), stage_widths=tuple(widths), name="separable_cnn"))


BUILDERS = {
    "resnet18": build_resnet18,
    "micro_cnn": build_micro_cnn,
    "separable_cnn": build_separable_cnn,
}


def build(name: str, **kwargs) -> ArchGraph:
    try:
        fn = BUILDERS[name]
    except KeyError:
        raise GraphError(f"unknown builder {name!r}; choose from {sorted(BUILDERS)}") from None
    return fn(**kwargs)


def stage_channel_totals(g: ArchGraph) -> dict[int, set[int]]:
    """Distinct output-channel totals seen per stage (a well-formed graph has one per stage)."""
    out: dict[int, set[int]] = {}
    for l in g.layers:
        if l.stage >= 0 and l.kind not in (LayerKind.CLASSIFIER, LayerKind.AGGREGATE):
            out.setdefault(l.stage, set()).add(l.out_channels)
    return out


__all__ = [
    "ArchGraph",
    "GraphError",
    "LayerKind",
    "LayerSpec",
    "Position",
    "PreservationClass",
    "build",
    "build_micro_cnn",
    "build_resnet18",
    "build_separable_cnn",
    "classify",
    "classify_layer",
    "stage_channel_totals",
    "validate",
]

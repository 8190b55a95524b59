"""Analytic parameter, MAC and activation accounting for :class:`ArchGraph`.

MAC convention (reproduces the evaluation-mode profiler counts for ResNet-18):

* conv / dense: one MAC per weight-input product, bias excluded
* norm: two per output element (scale and shift)
* global average pool: one per input element
* ReLU, max-pool, residual add, aggregation: zero
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from .arch import ArchGraph, GraphError, LayerKind, LayerSpec, PreservationClass, classify

NORM_MACS_PER_ELEMENT = 2


class AuditError(ValueError):
    pass


def conv_params(K: int, C_in: int, C_out: int, groups: int = 1, has_bias: bool = False) -> int:
    """Parameters of a (grouped) KxK convolution: K^2 * (C_in/groups) * C_out (+ C_out bias)."""
    if groups < 1 or C_in % groups or C_out % groups:
        raise AuditError(f"C_in={C_in} and C_out={C_out} must be divisible by groups={groups}")
    return K * K * (C_in // groups) * C_out + (C_out if has_bias else 0)


def layer_params(l: LayerSpec) -> tuple[int, int]:
    """(weight, bias) parameter counts of one layer."""
    k = l.kind
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
        w = conv_params(l.kernel, l.in_channels, l.out_channels, l.groups)
        return w, l.out_channels if l.has_bias else 0
    if k in (LayerKind.DENSE, LayerKind.CLASSIFIER):
        w = conv_params(1, l.in_channels, l.out_channels, l.groups)
        return w, l.out_channels if l.has_bias else 0
    if k is LayerKind.NORM:
        return l.out_channels, l.out_channels
    return 0, 0


def spatial_shapes(g: ArchGraph, resolution: tuple[int, int]) -> dict[str, tuple[int, int]]:
    """Output (H, W) of every layer; flat (post global-pool) tensors report (1, 1)."""
    H, W = resolution
    if H < 1 or W < 1:
        raise AuditError(f"bad input resolution {resolution}")
    out: dict[str, tuple[int, int]] = {}
    flat: set[str] = set()
    for l in g.layers:
        k = l.kind
        if k is LayerKind.INPUT:
            out[l.id] = (H, W)
            continue
        src = [out[p] for p in l.predecessors]
        h, w = src[0]
        is_flat = l.predecessors[0] in flat
        if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
            if is_flat:
                raise AuditError(f"layer {l.id!r}: convolution applied to a flattened tensor")
            pad = l.kernel // 2
            h = (h + 2 * pad - l.kernel) // l.stride + 1
            w = (w + 2 * pad - l.kernel) // l.stride + 1
        elif k is LayerKind.POOL:
            if h % l.stride or w % l.stride or l.kernel != l.stride:
                raise AuditError(f"layer {l.id!r}: {h}x{w} map does not tile into {l.kernel}x{l.kernel} pools")
            h, w = h // l.stride, w // l.stride
        elif k is LayerKind.ADD:
            if len(set(src)) != 1 or len({p in flat for p in l.predecessors}) != 1:
                raise AuditError(f"layer {l.id!r}: residual inputs disagree in spatial size {src}")
        elif k is LayerKind.GLOBAL_POOL:
            h, w = 1, 1
            flat.add(l.id)
        elif k in (LayerKind.DENSE, LayerKind.CLASSIFIER, LayerKind.AGGREGATE):
            if not is_flat:
                raise AuditError(f"layer {l.id!r}: {k.value} needs a globally pooled input")
            flat.add(l.id)
        elif is_flat:
            flat.add(l.id)
        if h < 1 or w < 1:
            raise AuditError(f"layer {l.id!r}: spatial size collapsed to {h}x{w}")
        out[l.id] = (h, w)
    return out


def _layer_macs(l: LayerSpec, in_hw, out_hw) -> int:
    k = l.kind
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
        w, _ = layer_params(l)
        return w * out_hw[0] * out_hw[1]
    if k in (LayerKind.DENSE, LayerKind.CLASSIFIER):
        return layer_params(l)[0]
    if k is LayerKind.NORM:
        return NORM_MACS_PER_ELEMENT * l.out_channels * out_hw[0] * out_hw[1]
    if k is LayerKind.GLOBAL_POOL:
        return l.in_channels * in_hw[0] * in_hw[1]
    return 0


@dataclass
class LayerAudit:
    id: str
    kind: str
    preservation: str
    params: int
    weight_params: int
    bias_params: int
    macs: int = 0
    activation_channels: int = 0
    activation_elements: int = 0


@dataclass
class AuditReport:
    graph: str
    r: int
    M: int
    per_layer: list[LayerAudit]
    total_params: int
    total_macs_per_batch: int = 0
    activation_elements: int = 0
    activation_bytes: int = 0
    resolution: tuple[int, int] | None = None
    batch_size: int = 0
    bytes_per_element: int = 4
    baseline_params: int | None = None
    gain_vs_baseline_percent: float | None = None
    # gain computed from counts rounded to 0.1M, the way parameter tables are usually printed
    table_gain_percent: float | None = None
    stage_channels: dict = field(default_factory=dict)

    def attach_baseline(self, baseline: "AuditReport") -> "AuditReport":
        b = baseline.total_params
        self.baseline_params = b
        self.gain_vs_baseline_percent = 100.0 * (self.total_params - b) / b
        rb, rt = round(b / 1e6, 1), round(self.total_params / 1e6, 1)
        # models under 50k parameters round to 0.0M; the table convention is undefined there
        self.table_gain_percent = round(100.0 * (rt - rb) / rb, 1) if rb else None
        return self

    def layer(self, layer_id: str) -> LayerAudit:
        for la in self.per_layer:
            if la.id == layer_id:
                return la
        raise KeyError(layer_id)

    def subtotal(self, *classes: PreservationClass) -> int:
        names = {c.value for c in classes}
        return sum(la.params for la in self.per_layer if la.preservation in names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution) if self.resolution else None
        d["stage_channels"] = {str(k): v for k, v in self.stage_channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        d = dict(d)
        d["per_layer"] = [LayerAudit(**x) for x in d["per_layer"]]
        if d.get("resolution"):
            d["resolution"] = tuple(d["resolution"])
        d["stage_channels"] = {int(k): v for k, v in d.get("stage_channels", {}).items()}
        return cls(**d)


def count_params(g: ArchGraph) -> AuditReport:
    rows = []
    for l in g.layers:
        w, b = layer_params(l)
        rows.append(LayerAudit(l.id, l.kind.value, classify(g, l).value, w + b, w, b,
                               activation_channels=l.out_channels))
    stages: dict[int, int] = {}
    for l in g.layers:
        if l.stage >= 0:
            stages[l.stage] = l.out_channels
    return AuditReport(
        graph=g.name,
        r=g.width_divisor,
        M=g.path_multiplicity,
        per_layer=rows,
        total_params=sum(x.params for x in rows),
        stage_channels=stages,
    )


def count_macs(g: ArchGraph, input_resolution: tuple[int, int], batch_size: int) -> int:
    return audit(g, input_resolution, batch_size).total_macs_per_batch


def activation_footprint(g: ArchGraph, input_resolution: tuple[int, int], batch_size: int) -> int:
    """Elements held by every layer output (input tensor included) for one batch."""
    return audit(g, input_resolution, batch_size).activation_elements


def audit(
    g: ArchGraph,
    input_resolution: tuple[int, int] = (32, 32),
    batch_size: int = 128,
    baseline: ArchGraph | AuditReport | None = None,
    bytes_per_element: int = 4,
) -> AuditReport:
    if batch_size < 1:
        raise AuditError("batch_size must be >= 1")
    rep = count_params(g)
    shapes = spatial_shapes(g, tuple(input_resolution))
    for l, la in zip(g.layers, rep.per_layer):
        out_hw = shapes[l.id]
        in_hw = shapes[l.predecessors[0]] if l.predecessors else out_hw
        la.macs = batch_size * _layer_macs(l, in_hw, out_hw)
        la.activation_elements = batch_size * l.out_channels * out_hw[0] * out_hw[1]
    rep.total_macs_per_batch = sum(la.macs for la in rep.per_layer)
    rep.activation_elements = sum(la.activation_elements for la in rep.per_layer)
    rep.activation_bytes = rep.activation_elements * bytes_per_element
    rep.bytes_per_element = bytes_per_element
    rep.resolution = tuple(input_resolution)
    rep.batch_size = batch_size
    if baseline is not None:
        if isinstance(baseline, ArchGraph):
            baseline = count_params(baseline)
        rep.attach_baseline(baseline)
    return rep


PRESERVED = "preserved exactly"
INFLATED_R = "inflated xr"
INFLATED_OTHER = "inflated other"
ADDED = "added"


def preservation_report(baseline: AuditReport, transformed: AuditReport) -> list[dict]:
    """Compare per-layer counts of a baseline and its MN rewrite."""
    if baseline.M != 1:
        raise AuditError("baseline report must come from an untransformed graph")
    before = {la.id: la for la in baseline.per_layer}
    after = {la.id: la for la in transformed.per_layer}
    missing = set(before) - set(after)
    if missing:
        raise AuditError(f"reports are from different graphs; transformed lacks {sorted(missing)}")
    r = transformed.r
    rows = []
    for la in transformed.per_layer:
        b = before.get(la.id)
        if b is None:
            if la.params:
                raise AuditError(f"layer {la.id!r} is new but carries parameters")
            status = ADDED
            b_params = b_weight = 0
        else:
            if b.kind != la.kind:
                raise AuditError(f"layer {la.id!r} changed kind {b.kind} -> {la.kind}")
            b_params, b_weight = b.params, b.weight_params
            if la.params == b.params:
                status = PRESERVED
            elif b.weight_params and la.weight_params == r * b.weight_params:
                status = INFLATED_R
            else:
                status = INFLATED_OTHER
        rows.append({
            "id": la.id,
            "kind": la.kind,
            "preservation": la.preservation,
            "params_before": b_params,
            "params_after": la.params,
            "weight_before": b_weight,
            "weight_after": la.weight_params,
            "status": status,
        })
    return rows


APPENDIX_ROWS = ("Params [M]", "Gain [%]", "Gain exact [%]", "MACs [G]", "Activation elements")


def appendix_csv(reports: list[AuditReport]) -> str:
    """One column per r, rows laid out like a parameter-count appendix table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["architecture", "metric", *[f"r={rep.r}" for rep in reports]])
    arch = reports[0].graph if reports else ""
    w.writerow([arch, APPENDIX_ROWS[0], *[f"{rep.total_params / 1e6:.1f}" for rep in reports]])
    w.writerow([arch, APPENDIX_ROWS[1], *[_fmt_gain(rep.table_gain_percent) for rep in reports]])
    w.writerow([arch, APPENDIX_ROWS[2], *[_fmt_gain(rep.gain_vs_baseline_percent, 2) for rep in reports]])
    w.writerow([arch, APPENDIX_ROWS[3], *[f"{rep.total_macs_per_batch / 1e9:.1f}" for rep in reports]])
    w.writerow([arch, APPENDIX_ROWS[4], *[str(rep.activation_elements) for rep in reports]])
    return buf.getvalue()


def _fmt_gain(v, nd=1) -> str:
    return "" if v is None else f"{v:+.{nd}f}"


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise AuditError(f"resolution must look like 32x32, got {text!r}") from None


__all__ = [
    "AuditError",
    "AuditReport",
    "GraphError",
    "LayerAudit",
    "activation_footprint",
    "appendix_csv",
    "audit",
    "conv_params",
    "count_macs",
    "count_params",
    "layer_params",
    "parse_resolution",
    "preservation_report",
    "spatial_shapes",
]

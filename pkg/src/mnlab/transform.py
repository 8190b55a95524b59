"""Multi-Narrow rewriting: narrow every path by 1/r and run r^2 such paths side by side.

Each path owns a contiguous block of channels in every layer. A layer with total
width ``C`` in the baseline has total width ``r * C`` afterwards, split into
``M = r^2`` blocks of ``C / r`` channels, and grouped layers keep those blocks
apart.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arch import ArchGraph, GraphError, LayerKind, LayerSpec, Position, validate


class TransformError(GraphError):
    pass


NORM_POLICIES = {
    # one statistic per channel; channels never straddle paths, so stats stay per path
    "per_path": "channel",
    # one statistic per path block
    "per_path_block": "group",
}


@dataclass(frozen=True)
class TransformConfig:
    r: int
    norm_policy: str = "per_path"

    def __post_init__(self):
        if self.r < 1:
            raise TransformError(f"r must be >= 1, got {self.r}")
        if self.norm_policy not in NORM_POLICIES:
            raise TransformError(f"unknown norm_policy {self.norm_policy!r}")

    @property
    def M(self) -> int:
        return path_count(self.r)


def path_count(r: int) -> int:
    if r < 1:
        raise TransformError(f"r must be >= 1, got {r}")
    return r * r


def mn_transform(g: ArchGraph, cfg: TransformConfig | int) -> ArchGraph:
    """Rewrite baseline graph ``g`` into its MN form with ``cfg.r``.

    Layer ids are kept, so per-layer audits of the baseline and the result line
    up one to one; the only new layer is the final ``aggregate`` node.
    """
    if isinstance(cfg, int):
        cfg = TransformConfig(cfg)
    if g.path_multiplicity != 1 or g.width_divisor != 1:
        raise TransformError(f"graph {g.name!r} is already transformed (r={g.width_divisor})")
    validate(g)
    r, M = cfg.r, cfg.M
    if r == 1:
        return g

    layers: list[LayerSpec] = []
    for l in g.layers:
        layers.append(_rewrite(g, l, r, M, NORM_POLICIES[cfg.norm_policy]))
    head = g.classifier
    layers.append(
        LayerSpec(
            "aggregate",
            LayerKind.AGGREGATE,
            in_channels=head.out_channels * M,
            out_channels=head.out_channels,
            groups=M,
            predecessors=(head.id,),
        )
    )
    out = ArchGraph(
        tuple(layers),
        path_multiplicity=M,
        width_divisor=r,
        stage_widths=tuple(w * r for w in g.stage_widths),
        name=f"{g.name}-mn{r}" if g.name else f"mn{r}",
    )
    return validate(out)


def _need(cond: bool, l: LayerSpec, what: str, r: int) -> None:
    if not cond:
        raise TransformError(f"layer {l.id!r}: {what} is not divisible by r={r}")


def _rewrite(g: ArchGraph, l: LayerSpec, r: int, M: int, norm_stats: str) -> LayerSpec:
    k = l.kind
    if k is LayerKind.INPUT:
        return l
    pos = g.position(l)

    if k is LayerKind.CLASSIFIER:
        _need(l.in_channels % r == 0, l, f"feature width {l.in_channels}", r)
        return replace(l, in_channels=l.in_channels * r, out_channels=l.out_channels * M, groups=M)

    if k in (LayerKind.CONV2D, LayerKind.DENSE):
        _need(l.out_channels % (l.groups * r) == 0, l, f"per-group output width {l.out_channels}/{l.groups}", r)
        if pos is Position.INPUT_FACING:
            if k is LayerKind.DENSE:
                raise TransformError(f"layer {l.id!r}: input-facing Dense layers are not supported")
            # the data fixes C_in; each path reads the whole shared input
            return replace(
                l,
                in_channels=l.in_channels * M,
                out_channels=l.out_channels * r,
                groups=l.groups * M,
                replicate_input=M,
            )
        _need(l.in_channels % (l.groups * r) == 0, l, f"per-group input width {l.in_channels}/{l.groups}", r)
        return replace(l, in_channels=l.in_channels * r, out_channels=l.out_channels * r, groups=l.groups * M)

    if k is LayerKind.DEPTHWISE:
        if pos is Position.INPUT_FACING:
            raise TransformError(f"layer {l.id!r}: input-facing depthwise layers cannot be narrowed")
        _need(l.in_channels % r == 0, l, f"width {l.in_channels}", r)
        c = l.in_channels * r
        return replace(l, in_channels=c, out_channels=c, groups=c)

    if k in (LayerKind.NORM, LayerKind.RELU, LayerKind.POOL, LayerKind.GLOBAL_POOL, LayerKind.ADD):
        _need(l.in_channels % r == 0, l, f"width {l.in_channels}", r)
        new = replace(l, in_channels=l.in_channels * r, out_channels=l.out_channels * r, groups=M)
        if k is LayerKind.NORM:
            new = replace(new, norm_stats=norm_stats)
        return new

    raise TransformError(f"layer {l.id!r}: cannot transform kind {k.value}")


def aggregate_outputs(path_logits) -> np.ndarray:
    """Elementwise mean of M per-path output vectors (shape ``(M, classes)``)."""
    arr = np.asarray(path_logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("aggregate_outputs needs a nonempty (M, classes) array")
    return arr.mean(axis=0)

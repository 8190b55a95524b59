"""Run an :class:`ArchGraph` forward and backward on numpy arrays."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..arch import ArchGraph, LayerKind, LayerSpec
from . import ops

TRAIN = "train"
EVAL = "eval"


class EngineError(RuntimeError):
    pass


@dataclass
class ModelState:
    """Parameters and running buffers keyed by layer id.

    ``params[layer_id]`` holds ``weight``/``bias`` (Norm: ``weight`` is the
    scale, ``bias`` the shift). ``buffers`` holds Norm running statistics.
    Optimizer moments live in ``opt`` and are managed by the trainer.
    """

    params: dict[str, dict[str, np.ndarray]]
    buffers: dict[str, dict[str, np.ndarray]]
    dtype: str = "float32"
    seed: int = 0
    opt: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def named_params(self):
        for lid, d in self.params.items():
            for name, arr in d.items():
                yield lid, name, arr

    def num_params(self) -> int:
        return sum(a.size for _, _, a in self.named_params())


def _stat_groups(l: LayerSpec) -> int:
    return l.out_channels if l.norm_stats == "channel" else l.groups


def param_shapes(l: LayerSpec) -> dict[str, tuple[int, ...]]:
    k = l.kind
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
        shapes = {"weight": (l.out_channels, l.in_channels // l.groups, l.kernel, l.kernel)}
    elif k in (LayerKind.DENSE, LayerKind.CLASSIFIER):
        shapes = {"weight": (l.out_channels, l.in_channels // l.groups)}
    elif k is LayerKind.NORM:
        return {"weight": (l.out_channels,), "bias": (l.out_channels,)}
    else:
        return {}
    if l.has_bias:
        shapes["bias"] = (l.out_channels,)
    return shapes


def init_state(g: ArchGraph, seed: int = 0, dtype="float32", identical_paths: bool = False) -> ModelState:
    """Fan-in scaled normal weights (ReLU gain except for the classifier), zero biases.

    Every path gets its own draw. ``identical_paths`` copies path 0 into all other
    paths; it exists for tests that need redundant members.
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    params: dict[str, dict[str, np.ndarray]] = {}
    buffers: dict[str, dict[str, np.ndarray]] = {}
    for l in g.layers:
        shapes = param_shapes(l)
        if not shapes:
            continue
        if l.kind is LayerKind.NORM:
            params[l.id] = {"weight": np.ones(l.out_channels, dt), "bias": np.zeros(l.out_channels, dt)}
            S = _stat_groups(l)
            buffers[l.id] = {"running_mean": np.zeros(S, dt), "running_var": np.ones(S, dt)}
            continue
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        gain = 1.0 if l.kind is LayerKind.CLASSIFIER else np.sqrt(2.0)
        p = {"weight": (rng.standard_normal(wshape) * (gain / np.sqrt(fan_in))).astype(dt)}
        if "bias" in shapes:
            p["bias"] = np.zeros(shapes["bias"], dt)
        params[l.id] = p
    state = ModelState(params, buffers, dtype=dt.name, seed=seed)
    if identical_paths and g.path_multiplicity > 1:
        for lid, name, arr in state.named_params():
            blk = arr.shape[0] // g.path_multiplicity
            arr[:] = np.tile(arr[:blk], (g.path_multiplicity,) + (1,) * (arr.ndim - 1))
    return state


def path_block(g: ArchGraph, layer_id: str, m: int) -> slice:
    """Slice of a layer's output channels (first tensor axis) owned by path ``m``."""
    l = g.layer(layer_id)
    M = g.path_multiplicity
    if not 0 <= m < M:
        raise EngineError(f"path {m} out of range for M={M}")
    blk = l.out_channels // M
    return slice(m * blk, (m + 1) * blk)


def zero_path(g: ArchGraph, state: ModelState, m: int) -> ModelState:
    """Copy of ``state`` with every parameter of path ``m`` set to zero."""
    out = state.copy()
    for lid, name, arr in out.named_params():
        arr[path_block(g, lid, m)] = 0
    return out


def validate_state(g: ArchGraph, state: ModelState) -> None:
    for l in g.layers:
        for name, shape in param_shapes(l).items():
            try:
                arr = state.params[l.id][name]
            except KeyError:
                raise EngineError(f"state is missing {l.id}.{name}") from None
            if arr.shape != shape:
                raise EngineError(f"layer {l.id!r}: {name} has shape {arr.shape}, graph expects {shape}")


@dataclass
class ForwardResult:
    aggregated_logits: np.ndarray
    path_logits: np.ndarray  # (N, M, classes)
    taps: dict[str, np.ndarray]
    mode: str
    graph: ArchGraph | None = None
    state: ModelState | None = None
    caches: dict | None = None


def forward(
    g: ArchGraph,
    state: ModelState,
    batch: np.ndarray,
    mode: str = EVAL,
    taps=None,
    retain: bool = False,
    aggregation: str = "logit",
) -> ForwardResult:
    """Evaluate the graph on ``batch`` (N, C, H, W).

    ``taps`` is an iterable of layer ids (or ``"all"``) whose outputs are
    returned. ``retain=True`` keeps what :func:`backward` needs. Train mode uses
    batch statistics in Norm layers and updates their running buffers.
    """
    if mode not in (TRAIN, EVAL):
        raise EngineError(f"mode must be {TRAIN!r} or {EVAL!r}")
    if batch.ndim != 4 or batch.shape[1] != g.input_channels:
        raise EngineError(
            f"input layer: batch shape {batch.shape} does not match {g.input_channels} input channels"
        )
    train = mode == TRAIN
    want = set(l.id for l in g.layers) if taps == "all" else set(taps or ())
    dt = np.dtype(state.dtype)
    acts: dict[str, np.ndarray] = {}
    caches: dict[str, tuple] = {}
    remaining = _consumer_counts(g)
    M = g.path_multiplicity
    tap_out: dict[str, np.ndarray] = {}
    x0 = batch.astype(dt, copy=False)
    for l in g.layers:
        ins = [acts[p] for p in l.predecessors]
        try:
            out, cache = _layer_forward(l, ins, state, train, x0, M, aggregation)
        except ValueError as e:
            raise EngineError(f"layer {l.id!r}: {e}") from e
        acts[l.id] = out
        if retain:
            caches[l.id] = cache
        if l.id in want:
            tap_out[l.id] = out
        if not retain:
            for p in l.predecessors:
                remaining[p] -= 1
                if remaining[p] == 0 and p not in want:
                    del acts[p]
    aggregated = acts[g.sink.id]
    if g.sink.kind is LayerKind.AGGREGATE:
        head = acts[g.classifier.id]
        path_logits = head.reshape(head.shape[0], M, -1)
    else:
        path_logits = aggregated[:, None, :]
    return ForwardResult(
        aggregated_logits=aggregated,
        path_logits=path_logits,
        taps=tap_out,
        mode=mode,
        graph=g,
        state=state,
        caches=caches if retain else None,
    )


def _consumer_counts(g: ArchGraph) -> dict[str, int]:
    counts = {l.id: 0 for l in g.layers}
    for l in g.layers:
        for p in l.predecessors:
            counts[p] += 1
    # the classifier output is needed to report per-path logits
    counts[g.classifier.id] += 1
    return counts


def _layer_forward(l: LayerSpec, ins, state, train, batch, M, aggregation):
    k = l.kind
    if k is LayerKind.INPUT:
        return batch, None
    x = ins[0]
    p = state.params.get(l.id, {})
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
        return ops.conv2d_forward(x, p["weight"], p.get("bias"), l.stride, l.groups, l.replicate_input)
    if k in (LayerKind.DENSE, LayerKind.CLASSIFIER):
        if x.ndim != 2:
            raise ValueError(f"{k.value} expects a flat (N, C) input, got {x.shape}")
        return ops.dense_forward(x, p["weight"], p.get("bias"), l.groups)
    if k is LayerKind.NORM:
        buf = state.buffers[l.id]
        return ops.norm_forward(
            x, p["weight"], p["bias"], buf["running_mean"], buf["running_var"], _stat_groups(l), train
        )
    if k is LayerKind.RELU:
        return ops.relu_forward(x)
    if k is LayerKind.POOL:
        return ops.maxpool_forward(x, l.stride)
    if k is LayerKind.GLOBAL_POOL:
        return ops.global_pool_forward(x)
    if k is LayerKind.ADD:
        out = ins[0]
        for other in ins[1:]:
            out = out + other
        return out, len(ins)
    if k is LayerKind.AGGREGATE:
        return ops.aggregate_forward(x, M, aggregation)
    raise ValueError(f"unsupported layer kind {k.value}")


def backward(result: ForwardResult, dlogits: np.ndarray, return_input_grad: bool = False):
    """Reverse pass from d(loss)/d(aggregated logits).

    Returns ``{layer_id: {"weight": ..., "bias": ...}}`` matching ``state.params``;
    with ``return_input_grad`` also the gradient w.r.t. the input batch.
    """
    if result.caches is None:
        raise EngineError("backward requires a forward pass run with retain=True")
    g = result.graph
    grads: dict[str, dict[str, np.ndarray]] = {}
    input_grad = None
    dacts: dict[str, np.ndarray] = {g.sink.id: dlogits}
    for l in reversed(g.layers):
        d = dacts.pop(l.id, None)
        if l.kind is LayerKind.INPUT:
            input_grad = d
            continue
        if d is None:  # output does not reach the loss
            continue
        cache = result.caches[l.id]
        k = l.kind
        pg: dict[str, np.ndarray] = {}
        if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
            dx, pg["weight"], db = ops.conv2d_backward(d, cache)
            if db is not None:
                pg["bias"] = db
            dins = [dx]
        elif k in (LayerKind.DENSE, LayerKind.CLASSIFIER):
            dx, pg["weight"], db = ops.dense_backward(d, cache)
            if db is not None:
                pg["bias"] = db
            dins = [dx]
        elif k is LayerKind.NORM:
            dx, pg["weight"], pg["bias"] = ops.norm_backward(d, cache)
            dins = [dx]
        elif k is LayerKind.RELU:
            dins = [ops.relu_backward(d, cache)]
        elif k is LayerKind.POOL:
            dins = [ops.maxpool_backward(d, cache)]
        elif k is LayerKind.GLOBAL_POOL:
            dins = [ops.global_pool_backward(d, cache)]
        elif k is LayerKind.ADD:
            dins = [d] * cache
        elif k is LayerKind.AGGREGATE:
            dins = [ops.aggregate_backward(d, cache)]
        else:
            raise EngineError(f"no backward rule for {k.value}")
        if pg:
            grads[l.id] = pg
        for pid, dx in zip(l.predecessors, dins):
            if pid in dacts:
                dacts[pid] = dacts[pid] + dx
            else:
                dacts[pid] = dx
    for lid, name, arr in result.state.named_params():
        grads.setdefault(lid, {}).setdefault(name, np.zeros_like(arr))
    if return_input_grad:
        return grads, input_grad
    return grads

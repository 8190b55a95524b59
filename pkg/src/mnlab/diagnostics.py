"""Analyses of a trained model: group-wise linear CKA, dead-neuron ratio, per-path and
oracle accuracy, and cumulative ensemble curves under three path orderings."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchGraph, LayerKind
from .data import Dataset
from .engine import EVAL, ModelState, forward
from .engine.ops import _softmax

ORDERINGS = ("BestFirst", "WorstFirst", "Original")
CHANNEL_KINDS = (
    LayerKind.CONV2D,
    LayerKind.DEPTHWISE,
    LayerKind.NORM,
    LayerKind.RELU,
    LayerKind.POOL,
    LayerKind.ADD,
)


class DiagnosticsError(ValueError):
    pass


# -- linear CKA ---------------------------------------------------------------------


def linear_cka(X, Y) -> float | None:
    """Linear CKA of two feature matrices with matching rows.

    Returns ``None`` when either input has no variance (the index is undefined).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DiagnosticsError(f"need two (N, d) arrays with equal N, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise DiagnosticsError("linear CKA needs at least two samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        return None
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


def group_cka_matrix(features, groups: int, chunk: int = 64) -> np.ndarray:
    """Pairwise linear CKA between ``groups`` contiguous channel blocks of ``features`` (N, C).

    Uses block norms of the centered cross-covariance, processed ``chunk`` blocks
    at a time so the full C x C matrix is never held. Undefined entries are NaN.
    """
    F = np.asarray(features, dtype=np.float64)
    N, C = F.shape
    if C % groups:
        raise DiagnosticsError(f"{C} channels do not split into {groups} groups")
    d = C // groups
    F = F - F.mean(axis=0)
    S = np.empty((groups, groups))
    for a in range(0, groups, chunk):
        b = min(a + chunk, groups)
        G = F[:, a * d:b * d].T @ F  # ((b-a)*d, C)
        S[a:b] = (G.reshape(b - a, d, groups, d) ** 2).sum(axis=(1, 3))
    diag = np.sqrt(np.diag(S))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = S / np.outer(diag, diag)
    out[(diag == 0)[:, None] | (diag == 0)[None, :]] = np.nan
    return out


def mean_pairwise(mat: np.ndarray) -> tuple[float | None, int, int]:
    """Mean over unordered off-diagonal pairs, ignoring NaN; returns (mean, pairs, undefined)."""
    iu = np.triu_indices(mat.shape[0], k=1)
    vals = mat[iu]
    ok = ~np.isnan(vals)
    mean = float(vals[ok].mean()) if ok.any() else None
    return mean, int(vals.size), int((~ok).sum())


# -- path outputs --------------------------------------------------------------------


@dataclass
class PathOutputs:
    path_logits: np.ndarray  # (N, M, classes)
    labels: np.ndarray
    aggregation: str = "logit"

    def __post_init__(self):
        self.path_logits = np.asarray(self.path_logits)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.path_logits.ndim != 3 or self.path_logits.shape[0] != self.labels.shape[0]:
            raise DiagnosticsError("path_logits must be (N, M, classes) with one label per sample")

    @property
    def M(self) -> int:
        return self.path_logits.shape[1]

    def _scores(self, logits):
        return _softmax(logits.astype(np.float64), axis=-1) if self.aggregation == "prob" else logits.astype(np.float64)

    @property
    def per_path_accuracy(self) -> np.ndarray:
        return (self.path_logits.argmax(axis=2) == self.labels[:, None]).mean(axis=0)

    def aggregated_predictions(self) -> np.ndarray:
        return self._scores(self.path_logits).mean(axis=1).argmax(axis=1)

    @property
    def aggregated_accuracy(self) -> float:
        return float(np.mean(self.aggregated_predictions() == self.labels))


def collect_path_outputs(g: ArchGraph, state: ModelState, ds: Dataset, batch_size: int = 512,
                         aggregation: str = "logit") -> PathOutputs:
    chunks = [forward(g, state, ds.images[i:i + batch_size], EVAL, aggregation=aggregation).path_logits
              for i in range(0, len(ds), batch_size)]
    return PathOutputs(np.concatenate(chunks), ds.labels, aggregation)


def oracle_accuracy(po: PathOutputs) -> float:
    """Fraction of samples that at least one path classifies correctly."""
    hit = po.path_logits.argmax(axis=2) == po.labels[:, None]
    return float(hit.any(axis=1).mean())


def path_orderings(po: PathOutputs) -> dict[str, list[int]]:
    acc = po.per_path_accuracy
    idx = np.arange(po.M)
    return {
        # lexsort: last key is primary; ties fall back to ascending path index
        "BestFirst": [int(i) for i in np.lexsort((idx, -acc))],
        "WorstFirst": [int(i) for i in np.lexsort((idx, acc))],
        "Original": [int(i) for i in idx],
    }


def cumulative_curves(po: PathOutputs) -> dict[str, list[float]]:
    """Accuracy of the mean of the first k paths, k = 1..M, for each ordering."""
    scores = po._scores(po.path_logits)
    final = po.aggregated_accuracy
    curves = {}
    for name, order in path_orderings(po).items():
        running = np.zeros((scores.shape[0], scores.shape[2]))
        accs = []
        for k, m in enumerate(order, start=1):
            running += scores[:, m]
            accs.append(float(np.mean(running.argmax(axis=1) == po.labels)))
        # the full set is order-independent; use the canonical mean so rounding
        # in the running sum cannot split the curves at k = M
        accs[-1] = final
        curves[name] = accs
    return curves


# -- layer statistics ----------------------------------------------------------------


def default_layers(g: ArchGraph) -> list[str]:
    return [l.id for l in g.layers if l.kind is LayerKind.RELU]


def _check_layers(g: ArchGraph, layers) -> list[str]:
    out = []
    for lid in layers:
        if lid not in g:
            raise DiagnosticsError(f"no layer named {lid!r} in graph {g.name!r}")
        l = g.layer(lid)
        if l.kind not in CHANNEL_KINDS:
            raise DiagnosticsError(f"layer {lid!r} ({l.kind.value}) has no channel structure to analyse")
        out.append(lid)
    return out


def _scan(g, state, ds, cka_layers, relu_layers, batch_size):
    """One eval pass collecting pooled features (CKA) and per-channel maxima (DNR)."""
    taps = set(cka_layers) | set(relu_layers)
    pooled = {lid: [] for lid in cka_layers}
    maxima: dict[str, np.ndarray] = {}
    for i in range(0, len(ds), batch_size):
        fr = forward(g, state, ds.images[i:i + batch_size], EVAL, taps=taps)
        for lid in cka_layers:
            a = fr.taps[lid]
            pooled[lid].append(a.mean(axis=(2, 3)) if a.ndim == 4 else a)
        for lid in relu_layers:
            a = fr.taps[lid]
            mx = a.max(axis=(0, 2, 3)) if a.ndim == 4 else a.max(axis=0)
            maxima[lid] = mx if lid not in maxima else np.maximum(maxima[lid], mx)
    return {k: np.concatenate(v).astype(np.float64) for k, v in pooled.items()}, maxima


def layerwise_group_cka(g: ArchGraph, state: ModelState, ds: Dataset, layer_selection=None,
                        ref_groups: int = 4, full_matrix: bool = False, batch_size: int = 512) -> list[dict]:
    layers = _check_layers(g, layer_selection or default_layers(g))
    pooled, _ = _scan(g, state, ds, layers, [], batch_size)
    return _cka_rows(g, layers, pooled, ref_groups, full_matrix)


def _cka_rows(g, layers, pooled, ref_groups, full_matrix):
    groups = g.path_multiplicity if g.path_multiplicity > 1 else ref_groups
    rows = []
    for lid in layers:
        mat = group_cka_matrix(pooled[lid], groups)
        mean, pairs, undefined = mean_pairwise(mat)
        row = {"layer": lid, "mean_cka": mean, "groups": groups, "pairs": pairs, "undefined_pairs": undefined}
        if full_matrix:
            row["matrix"] = [[None if np.isnan(v) else float(v) for v in r] for r in mat]
        rows.append(row)
    return rows


def dead_neuron_ratio(g: ArchGraph, state: ModelState, ds: Dataset, batch_size: int = 512) -> list[dict]:
    """Per ReLU layer: fraction of channels whose output is exactly zero on every sample and position."""
    relus = default_layers(g)
    _, maxima = _scan(g, state, ds, [], relus, batch_size)
    return _dnr_rows(relus, maxima)


def _dnr_rows(relus, maxima):
    rows = []
    for lid in relus:
        dead = int(np.sum(maxima[lid] == 0))
        total = int(maxima[lid].size)
        rows.append({"layer": lid, "dead": dead, "total": total, "ratio": dead / total})
    return rows


# -- full report ------------------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    r: int
    M: int
    n_samples: int
    aggregation: str
    cka_per_layer: list[dict]
    dnr_per_layer: list[dict]
    per_path_accuracy: list[float]
    aggregated_accuracy: float
    oracle_accuracy: float
    cumulative_curves: dict[str, list[float]]
    orderings: dict[str, list[int]]
    cka_ref_groups: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def diagnose(g: ArchGraph, state: ModelState, ds: Dataset, layer_selection=None, ref_groups: int = 4,
             aggregation: str = "logit", full_matrix: bool = False, batch_size: int = 512) -> DiagnosticsReport:
    if len(ds) == 0:
        raise DiagnosticsError("evaluation set is empty")
    cka_layers = _check_layers(g, layer_selection or default_layers(g))
    relus = default_layers(g)
    pooled, maxima = _scan(g, state, ds, cka_layers, relus, batch_size)
    po = collect_path_outputs(g, state, ds, batch_size, aggregation)
    return DiagnosticsReport(
        r=g.width_divisor,
        M=g.path_multiplicity,
        n_samples=len(ds),
        aggregation=aggregation,
        cka_per_layer=_cka_rows(g, cka_layers, pooled, ref_groups, full_matrix),
        dnr_per_layer=_dnr_rows(relus, maxima),
        per_path_accuracy=[float(a) for a in po.per_path_accuracy],
        aggregated_accuracy=po.aggregated_accuracy,
        oracle_accuracy=oracle_accuracy(po),
        cumulative_curves=cumulative_curves(po),
        orderings=path_orderings(po),
        cka_ref_groups=ref_groups if g.path_multiplicity == 1 else None,
    )


def write_diagnostics(report: DiagnosticsReport, out_json) -> list[Path]:
    """Write ``diag.json`` plus the flat CSV companions next to it."""
    out_json = Path(out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    d = out_json.parent
    written = [out_json]

    def _csv(name, header, rows):
        p = d / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(p)

    _csv("cka_layerwise.csv", ["layer", "mean_cka", "groups"],
         [[r["layer"], "" if r["mean_cka"] is None else repr(r["mean_cka"]), r["groups"]] for r in report.cka_per_layer])
    _csv("dnr_layerwise.csv", ["layer", "dead", "total", "ratio"],
         [[r["layer"], r["dead"], r["total"], repr(r["ratio"])] for r in report.dnr_per_layer])
    _csv("cumulative_curves.csv", ["ordering", "k", "accuracy"],
         [[o, k, repr(a)] for o in ORDERINGS for k, a in enumerate(report.cumulative_curves[o], start=1)])
    _csv("paths.csv", ["path", "accuracy"], [[m, repr(a)] for m, a in enumerate(report.per_path_accuracy)])
    return written

"""(r x IPC x seed) sweeps: subsample -> transform -> audit -> train -> diagnose, one
directory per cell, plus report emission from a finished results directory."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arch
from .audit import audit
from .data import (
    Dataset,
    load_cifar_binary,
    load_dataset,
    read_indices,
    standardize,
    subsample_indices,
    synth_dataset,
    write_indices,
)
from .determinism import deterministic
from .diagnostics import diagnose, write_diagnostics
from .train import TrainConfig, train
from .transform import TransformConfig, mn_transform

log = logging.getLogger(__name__)

DEFAULT_R_GRID = (1, 2, 4, 8, 16, 32)
RESULT_FILE = "result.json"


class SweepError(RuntimeError):
    pass


@dataclass
class SweepConfig:
    out_dir: str
    builder: dict = field(default_factory=lambda: {"name": "micro_cnn", "args": {"widths": [16, 32]}})
    r_grid: list[int] = field(default_factory=lambda: list(DEFAULT_R_GRID))
    ipc_grid: list[int] = field(default_factory=lambda: [50, 10])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    train: dict = field(default_factory=dict)
    transform: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    audit_batch: int = 128
    parallelism: int = 1

    def __post_init__(self):
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        if not self.r_grid or not self.ipc_grid or not self.seeds:
            raise SweepError("r_grid, ipc_grid and seeds must all be nonempty")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def cell_id(r: int, ipc: int, seed: int) -> str:
    return f"r{r}_ipc{ipc}_s{seed}"


# -- datasets -----------------------------------------------------------------------


def load_sweep_data(spec: dict, max_ipc: int) -> tuple[Dataset, Dataset]:
    """(train pool, evaluation set) described by a sweep ``dataset`` block."""
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        common = {k: spec[k] for k in ("resolution", "channels", "noise", "family", "template_seed") if k in spec}
        classes = spec.get("classes", 4)
        pool = synth_dataset(classes, spec.get("samples_per_class", max_ipc), seed=spec.get("seed", 0), **common)
        test = synth_dataset(classes, spec.get("test_per_class", 32), seed=spec.get("seed", 0) + 10_000, **common)
        return pool, test
    if kind == "cifar":
        variant = str(spec.get("variant", "10"))
        return load_cifar_binary(spec["train"], variant), load_cifar_binary(spec["test"], variant)
    if kind == "npz":
        return load_dataset(spec["train"]), load_dataset(spec["test"])
    raise SweepError(f"unknown dataset kind {kind!r}")


# -- one cell ------------------------------------------------------------------------


def _split_path(out: Path, ipc: int, seed: int) -> Path:
    return out / "splits" / f"ipc{ipc}_s{seed}.idx"


def _ensure_split(out: Path, pool: Dataset, ipc: int, seed: int) -> np.ndarray:
    # one index file per (ipc, seed), shared by every r
    p = _split_path(out, ipc, seed)
    if p.exists():
        return read_indices(p)
    idx = subsample_indices(pool.labels, ipc, seed, pool.class_count)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(f".tmp{os.getpid()}")
    write_indices(tmp, idx)
    os.replace(tmp, p)
    return idx


def run_cell(cfg: SweepConfig, r: int, ipc: int, seed: int, pool: Dataset, test: Dataset) -> dict:
    out = Path(cfg.out_dir)
    cid = cell_id(r, ipc, seed)
    cdir = out / "cells" / cid
    cdir.mkdir(parents=True, exist_ok=True)
    idx = _ensure_split(out, pool, ipc, seed)
    ds = pool.take(idx)
    ds = Dataset(ds.images, ds.labels, ds.class_count, ipc=ipc,
                 provenance=dict(pool.provenance, ipc=ipc, seed=seed, split=str(_split_path(out, ipc, seed))))

    args = dict(cfg.builder.get("args", {}))
    args.setdefault("num_classes", pool.class_count)
    args.setdefault("input_channels", pool.images.shape[1])
    base = arch.build(cfg.builder["name"], **args)
    g = mn_transform(base, TransformConfig(r, **cfg.transform))
    rep = audit(g, pool.resolution, cfg.audit_batch, baseline=base)
    (cdir / "audit.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))

    tcfg = TrainConfig.from_dict({**cfg.train, "seed": seed})
    res = train(g, ds, test, tcfg, out_dir=cdir)

    mean, std = res.norm_mean, res.norm_std
    dcfg = dict(cfg.diagnostics)
    diag = diagnose(g, res.state, standardize(test, mean, std), layer_selection=dcfg.get("layers"),
                    ref_groups=dcfg.get("ref_groups", 4), aggregation=tcfg.aggregation)
    write_diagnostics(diag, cdir / "diag.json")

    result = {
        "cell_id": cid,
        "r": r,
        "ipc": ipc,
        "seed": seed,
        "test_accuracy": diag.aggregated_accuracy,
        "train_accuracy": res.final["train_acc"],
        "oracle_accuracy": diag.oracle_accuracy,
        "per_path_max": max(diag.per_path_accuracy),
        "params": rep.total_params,
        "macs": rep.total_macs_per_batch,
        "activation_elements": rep.activation_elements,
        "activation_bytes": rep.activation_bytes,
        "dense_coupling_params": rep.subtotal(arch.PreservationClass.DENSE_COUPLING),
        "config": {"sweep": cfg.to_dict(), "train": tcfg.to_dict()},
    }
    # written last: its presence marks the cell complete
    tmp = cdir / (RESULT_FILE + ".tmp")
    tmp.write_text(json.dumps(result, indent=1, sort_keys=True))
    os.replace(tmp, cdir / RESULT_FILE)
    return result


def _cell_job(cfg_dict, r, ipc, seed):
    cfg = SweepConfig.from_dict(cfg_dict)
    pool, test = load_sweep_data(cfg.dataset, max(cfg.ipc_grid))
    return run_cell(cfg, r, ipc, seed, pool, test)


@dataclass
class SweepOutcome:
    table: "ResultsTable"
    completed: list[str]
    skipped: list[str]
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_sweep(cfg: SweepConfig) -> SweepOutcome:
    """Run every missing cell; a failed cell is recorded and the sweep moves on."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    cells = [(r, ipc, s) for ipc in cfg.ipc_grid for r in cfg.r_grid for s in cfg.seeds]
    todo, skipped = [], []
    for c in cells:
        if (out / "cells" / cell_id(*c) / RESULT_FILE).exists():
            skipped.append(cell_id(*c))
        else:
            todo.append(c)
    completed, failures = [], {}
    workers = 1 if deterministic() else max(1, cfg.parallelism)
    if todo and workers == 1:
        pool, test = load_sweep_data(cfg.dataset, max(cfg.ipc_grid))
        for c in todo:
            try:
                run_cell(cfg, *c, pool, test)
                completed.append(cell_id(*c))
            except Exception as e:  # noqa: BLE001 - a failing cell must not stop the sweep
                failures[cell_id(*c)] = f"{type(e).__name__}: {e}"
                log.error("cell %s failed:\n%s", cell_id(*c), traceback.format_exc())
    elif todo:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {cell_id(*c): ex.submit(_cell_job, cfg.to_dict(), *c) for c in todo}
            for cid, fut in futs.items():
                try:
                    fut.result()
                    completed.append(cid)
                except Exception as e:  # noqa: BLE001
                    failures[cid] = f"{type(e).__name__}: {e}"
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1, sort_keys=True))
    return SweepOutcome(ResultsTable.from_dir(out), completed, skipped, failures)


# -- results table and report ----------------------------------------------------------


@dataclass
class ResultsTable:
    rows: list[dict]

    @classmethod
    def from_dir(cls, results_dir) -> "ResultsTable":
        rows = []
        for p in sorted(Path(results_dir).glob(f"cells/*/{RESULT_FILE}")):
            d = json.loads(p.read_text())
            rows.append({k: d[k] for k in ("cell_id", "r", "ipc", "seed", "test_accuracy", "oracle_accuracy",
                                           "params", "macs", "activation_elements", "activation_bytes")})
        rows.sort(key=lambda x: (-x["ipc"], x["r"], x["seed"]))
        # gain is always derived, never stored in the cell
        base = {}
        for ipc in {x["ipc"] for x in rows}:
            accs = [x["test_accuracy"] for x in rows if x["ipc"] == ipc and x["r"] == 1]
            base[ipc] = float(np.mean(accs)) if accs else None
        for x in rows:
            b = base[x["ipc"]]
            x["gain_vs_r1"] = None if b is None else x["test_accuracy"] - b
        return cls(rows)

    @property
    def r_values(self) -> list[int]:
        return sorted({x["r"] for x in self.rows})

    @property
    def ipc_values(self) -> list[int]:
        return sorted({x["ipc"] for x in self.rows}, reverse=True)

    def aggregate(self) -> list[dict]:
        out = []
        for ipc in self.ipc_values:
            base = [x["test_accuracy"] for x in self.rows if x["r"] == 1 and x["ipc"] == ipc]
            base_mean = float(np.mean(base)) if base else None
            for r in self.r_values:
                cell = [x for x in self.rows if x["r"] == r and x["ipc"] == ipc]
                if not cell:
                    continue
                acc = np.array([x["test_accuracy"] for x in cell])
                out.append({
                    "r": r,
                    "ipc": ipc,
                    "n": len(cell),
                    "test_accuracy_mean": float(acc.mean()),
                    "test_accuracy_std": float(acc.std(ddof=1)) if len(cell) > 1 else 0.0,
                    # mean of per-seed gains, written as a difference of means so r=1 is exactly 0
                    "gain_mean": None if base_mean is None else float(acc.mean()) - base_mean,
                    "oracle_accuracy_mean": float(np.mean([x["oracle_accuracy"] for x in cell])),
                    "cell_ids": [x["cell_id"] for x in cell],
                })
        return out

    def matrix(self, key: str) -> tuple[list[int], list[int], list[list[float | None]]]:
        """(ipc rows, r columns, values); missing cells are None."""
        agg = {(a["ipc"], a["r"]): a for a in self.aggregate()}
        ipcs, rs = self.ipc_values, self.r_values
        vals = [[agg[(i, r)][key] if (i, r) in agg else None for r in rs] for i in ipcs]
        return ipcs, rs, vals


def minmax_normalize(matrix, axis: int = 1) -> list[list[float | None]]:
    """Min-max scale each row (axis=1) or column (axis=0), skipping missing entries.

    A slice whose entries are all equal maps to 0.
    """
    arr = np.array([[np.nan if v is None else v for v in row] for row in matrix], dtype=float)
    if axis == 0:
        arr = arr.T
    out = np.full_like(arr, np.nan)
    for i, row in enumerate(arr):
        ok = ~np.isnan(row)
        if not ok.any():
            continue
        lo, hi = row[ok].min(), row[ok].max()
        out[i, ok] = 0.0 if hi == lo else (row[ok] - lo) / (hi - lo)
    if axis == 0:
        out = out.T
    return [[None if np.isnan(v) else float(v) for v in row] for row in out]


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _matrix_csv(ipcs, rs, vals) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ipc", *[f"r={r}" for r in rs]])
    for ipc, row in zip(ipcs, vals):
        w.writerow([ipc, *[_fmt(v) for v in row]])
    return buf.getvalue()


REPORT_FILES = ("accuracy_matrix.csv", "accuracy_matrix_norm.csv", "gain_matrix.csv", "cost_table.csv",
                "summary.json")


def emit_report(results_dir, out_dir=None) -> dict[str, Path]:
    """Write plot-ready matrices, the cost table and ``summary.json``.

    ``accuracy_matrix_norm.csv`` min-max scales each IPC row across r, so the
    best r within a data regime reads as 1.
    """
    results_dir = Path(results_dir)
    table = ResultsTable.from_dir(results_dir)
    if not table.rows:
        raise SweepError(f"{results_dir}: no completed cells to report")
    out = Path(out_dir) if out_dir else results_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    ipcs, rs, acc = table.matrix("test_accuracy_mean")
    _, _, gain = table.matrix("gain_mean")
    files = {
        "accuracy_matrix.csv": _matrix_csv(ipcs, rs, acc),
        "accuracy_matrix_norm.csv": _matrix_csv(ipcs, rs, minmax_normalize(acc, axis=1)),
        "gain_matrix.csv": _matrix_csv(ipcs, rs, gain),
    }
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "params", "macs", "activation_elements", "activation_bytes"])
    for r in rs:
        x = next(x for x in table.rows if x["r"] == r)
        w.writerow([r, x["params"], x["macs"], x["activation_elements"], x["activation_bytes"]])
    files["cost_table.csv"] = buf.getvalue()

    summary = {
        "r_grid": rs,
        "ipc_grid": ipcs,
        "cells": [{k: x[k] for k in ("cell_id", "r", "ipc", "seed", "test_accuracy", "gain_vs_r1",
                                     "oracle_accuracy", "params", "macs")} for x in table.rows],
        "aggregate": table.aggregate(),
        "files": sorted(files),
    }
    files["summary.json"] = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
    return paths

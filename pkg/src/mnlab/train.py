"""Training protocol: AdamW with decoupled weight decay, cosine-annealed learning rate,
batch-scaled peak rate, IPC-scaled epoch budget, one loss on the aggregated output."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .arch import ArchGraph, LayerKind, validate
from .data import Dataset, augment, channel_stats, standardize
from .determinism import thread_limit
from .engine import EVAL, TRAIN, ModelState, backward, forward, init_state, save_checkpoint, softmax_xent

log = logging.getLogger(__name__)

BASE_LR = 5e-3
BASE_BATCH = 128
FULL_EPOCHS = 200
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


class TrainingDiverged(RuntimeError):
    pass


def max_lr_for_batch(batch_size: int) -> float:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return BASE_LR * batch_size / BASE_BATCH


def epochs_for_ipc(ipc: int) -> int:
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    if ipc >= 100:
        return FULL_EPOCHS
    return int(math.floor(FULL_EPOCHS * 100 / ipc + 0.5))


def cosine_lr(step: int, total_steps: int, max_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return max_lr
    return max_lr * (1 + math.cos(math.pi * step / total_steps)) / 2


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_lr: float | None = None  # None: max_lr_for_batch(batch_size)
    weight_decay: float = 5e-2
    epochs: int | None = None  # None: epochs_for_ipc(ipc of the training set)
    seed: int = 0
    optimizer: str = "adamw"  # or "sgd" (momentum SGD, for sensitivity studies)
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"
    precision: str = "float32"
    augmentation: bool = True
    aug_shift: int = 4
    aggregation: str = "logit"
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.max_lr is not None and self.max_lr < 0:
            raise ValueError("max_lr must be >= 0")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def peak_lr(self) -> float:
        return max_lr_for_batch(self.batch_size) if self.max_lr is None else self.max_lr

    def resolved_epochs(self, ipc: int | None) -> int:
        if self.epochs is not None:
            return self.epochs
        if ipc is None:
            raise ValueError("epochs not set and the training set has no ipc to derive them from")
        return epochs_for_ipc(ipc)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def no_decay_set(g: ArchGraph) -> frozenset:
    """Norm affine parameters and every bias are excluded from weight decay."""
    out = set()
    for l in g.layers:
        if l.kind is LayerKind.NORM:
            out.update({(l.id, "weight"), (l.id, "bias")})
        elif l.has_bias:
            out.add((l.id, "bias"))
    return frozenset(out)


def optimizer_step(state: ModelState, grads, cfg: TrainConfig, step: int, lr: float | None = None,
                   no_decay=frozenset()) -> ModelState:
    """Apply one update in place (and return ``state``). ``step`` counts from 1."""
    lr = cfg.peak_lr if lr is None else lr
    m = state.opt.setdefault("m", {})
    v = state.opt.setdefault("v", {})
    for lid, name, p in state.named_params():
        gr = grads[lid][name]
        if gr.shape != p.shape:
            raise ValueError(f"gradient for {lid}.{name} has shape {gr.shape}, parameter {p.shape}")
        key = f"{lid}/{name}"
        decay = cfg.weight_decay if (lid, name) not in no_decay else 0.0
        if cfg.optimizer == "adamw":
            mk = m.setdefault(key, np.zeros_like(p))
            vk = v.setdefault(key, np.zeros_like(p))
            mk *= cfg.beta1
            mk += (1 - cfg.beta1) * gr
            vk *= cfg.beta2
            vk += (1 - cfg.beta2) * gr * gr
            mhat = mk / (1 - cfg.beta1 ** step)
            vhat = vk / (1 - cfg.beta2 ** step)
            if decay:
                p *= 1 - lr * decay
            p -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)
        else:
            buf = m.setdefault(key, np.zeros_like(p))
            buf *= cfg.momentum
            buf += gr + decay * p
            p -= (lr * buf).astype(p.dtype, copy=False)
    state.opt["step"] = step
    return state


def predict(g: ArchGraph, state: ModelState, images: np.ndarray, batch_size: int = 512,
            aggregation: str = "logit") -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (aggregated logits, path logits) over a whole array, batch by batch."""
    agg, paths = [], []
    for i in range(0, len(images), batch_size):
        fr = forward(g, state, images[i:i + batch_size], EVAL, aggregation=aggregation)
        agg.append(fr.aggregated_logits)
        paths.append(fr.path_logits)
    return np.concatenate(agg), np.concatenate(paths)


def accuracy(g: ArchGraph, state: ModelState, ds: Dataset, batch_size: int = 512, aggregation="logit") -> float:
    if len(ds) == 0:
        return float("nan")
    logits, _ = predict(g, state, ds.images, batch_size, aggregation)
    return float(np.mean(logits.argmax(axis=1) == ds.labels))


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    checkpoints: list[str] = field(default_factory=list)
    norm_mean: list[float] = field(default_factory=list)
    norm_std: list[float] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1]


def train(
    g: ArchGraph,
    ds_train: Dataset,
    ds_val: Dataset | None,
    cfg: TrainConfig,
    out_dir=None,
    state: ModelState | None = None,
) -> TrainResult:
    """Train ``g`` from scratch (or from ``state``) and optionally write a run directory.

    The run directory gets ``config.json``, ``history.csv``, ``meta.json`` and
    ``checkpoint.mnck``. Standardization statistics come from ``ds_train`` and
    are reused for ``ds_val``.
    """
    validate(g)
    if ds_train.class_count != g.num_classes:
        raise ValueError(f"dataset has {ds_train.class_count} classes, classifier has {g.num_classes}")
    mean, std = channel_stats(ds_train)
    tr = standardize(ds_train, mean, std)
    va = standardize(ds_val, mean, std) if ds_val is not None else None
    dt = np.dtype(cfg.precision)
    images = tr.images.astype(dt)

    if state is None:
        state = init_state(g, cfg.seed, dt)
    no_decay = no_decay_set(g)
    rng = np.random.default_rng((cfg.seed, 1))
    epochs = cfg.resolved_epochs(ds_train.ipc)
    N = len(tr)
    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total = epochs * steps_per_epoch
    peak = cfg.peak_lr
    history: list[dict] = []
    step = 0
    with thread_limit():
        for epoch in range(1, epochs + 1):
            order = rng.permutation(N)
            losses = []
            lr = peak
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                xb = images[idx]
                if cfg.augmentation:
                    xb = augment(xb, rng, shift=cfg.aug_shift)
                fr = forward(g, state, xb, TRAIN, retain=True, aggregation=cfg.aggregation)
                loss, dlogits = softmax_xent(fr.aggregated_logits, tr.labels[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss} at step {step} (epoch {epoch})")
                grads = backward(fr, dlogits)
                lr = cosine_lr(step, total, peak)
                step += 1
                optimizer_step(state, grads, cfg, step, lr, no_decay)
                losses.append(loss)
            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_acc": accuracy(g, state, tr, cfg.eval_batch_size, cfg.aggregation),
                "val_acc": accuracy(g, state, va, cfg.eval_batch_size, cfg.aggregation) if va is not None else float("nan"),
            }
            history.append(row)
            log.debug("epoch %d loss %.4f train_acc %.3f", epoch, row["train_loss"], row["train_acc"])

    result = TrainResult(state, history, norm_mean=[float(x) for x in mean], norm_std=[float(x) for x in std])
    if out_dir is not None:
        result.checkpoints.append(write_run(out_dir, g, cfg, result, ds_train, epochs, total))
    return result


def write_run(out_dir, g: ArchGraph, cfg: TrainConfig, result: TrainResult, ds_train: Dataset,
              epochs: int, total_steps: int) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    g.save(out / "graph.json")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in result.history:
            w.writerow({k: _fmt(row[k]) for k in HISTORY_FIELDS})
    meta = {
        "graph": g.name,
        "r": g.width_divisor,
        "M": g.path_multiplicity,
        "batch_size": cfg.batch_size,
        "peak_lr": cfg.peak_lr,
        "epochs": epochs,
        "total_steps": total_steps,
        "n_train": len(ds_train),
        "ipc": ds_train.ipc,
        "norm_mean": result.norm_mean,
        "norm_std": result.norm_std,
        "provenance": ds_train.provenance,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))
    ckpt = out / "checkpoint.mnck"
    save_checkpoint(ckpt, g, result.state, {"norm_mean": result.norm_mean, "norm_std": result.norm_std,
                                            "aggregation": cfg.aggregation})
    return str(ckpt)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else (float(v) if v else float("nan"))) for k, v in r.items()} for r in rows]

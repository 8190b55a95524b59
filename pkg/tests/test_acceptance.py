"""Acceptance gate: one printed PASS/FAIL line per criterion, at the stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are written
straight to the terminal (not captured) so they land in the test log.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from mnlab import arch
from mnlab.arch import PreservationClass
from mnlab.audit import count_macs, count_params
from mnlab.diagnostics import PathOutputs, cumulative_curves, dead_neuron_ratio, linear_cka, oracle_accuracy
from mnlab.data import synth_dataset
from mnlab.engine import EVAL, forward, init_state, ops, zero_path
from mnlab.schemas import JSON_SCHEMAS, validate_csv, validate_json
from mnlab.sweep import SweepConfig, emit_report, run_sweep
from mnlab.train import epochs_for_ipc, max_lr_for_batch
from mnlab.transform import mn_transform

import gradcheck
from oracles import cka_brute, curves_brute, dnr_brute, naive_conv, oracle_brute, path_fixture

R_GRID = (1, 2, 4, 8, 16, 32)


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nAC{n:<2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def _builders():
    return {
        "resnet18": arch.build_resnet18(),
        "micro_cnn": arch.build_micro_cnn([32, 64, 128], 10),
        "separable_cnn": arch.build_separable_cnn([32, 64, 128], 10),
    }


def test_ac01_dense_coupling_preserved(verdict):
    bad = []
    for name, g in _builders().items():
        base = count_params(g).subtotal(PreservationClass.DENSE_COUPLING)
        for r in R_GRID:
            got = count_params(mn_transform(g, r)).subtotal(PreservationClass.DENSE_COUPLING)
            if got != base:
                bad.append(f"{name} r={r}: {got} != {base}")
    verdict(1, "intermediate DenseCoupling params equal before/after, all builders, r in 1..32",
            not bad, "; ".join(bad) or "exact integer equality, 18 cases")


def test_ac02_parameter_table(verdict):
    target_m = [11.2, 11.3, 11.4, 11.7, 12.2, 13.3]
    target_gain = [0.0, 0.9, 1.8, 4.5, 8.9, 18.8]
    base = arch.build_resnet18()
    reps = [count_params(mn_transform(base, r)).attach_baseline(count_params(base)) for r in R_GRID]
    rel = [abs(rep.total_params / 1e6 - t) / t for rep, t in zip(reps, target_m)]
    # gains as a parameter table prints them: from counts rounded to 0.1M
    dgain = [abs(rep.table_gain_percent - t) for rep, t in zip(reps, target_gain)]
    exact = ", ".join(f"{rep.gain_vs_baseline_percent:.2f}" for rep in reps)
    ok = max(rel) < 0.01 and max(dgain) <= 0.5
    verdict(2, "ResNet-18 params within 1% and table gains within 0.5 pt", ok,
            f"max rel {max(rel):.4f}, max gain dev {max(dgain):.2f} pt; exact gains {exact}")


def test_ac03_macs(verdict):
    base = arch.build_resnet18()
    m1 = count_macs(base, (32, 32), 128) / 1e9
    m32 = count_macs(mn_transform(base, 32), (32, 32), 128) / 1e9
    e1, e32 = abs(m1 - 71.3) / 71.3, abs(m32 - 83.4) / 83.4
    verdict(3, "MACs at 32x32, batch 128: r=1 within 3% of 71.3G, r=32 within 5% of 83.4G",
            e1 < 0.03 and e32 < 0.05, f"r=1 {m1:.2f}G ({e1:.2%}), r=32 {m32:.2f}G ({e32:.2%})")


def test_ac04_activation_channels(verdict):
    bad = []
    for name, g in _builders().items():
        totals = arch.stage_channel_totals(g)
        for r in R_GRID:
            got = arch.stage_channel_totals(mn_transform(g, r))
            want = {s: {r * next(iter(c))} for s, c in totals.items()}
            if got != want:
                bad.append(f"{name} r={r}")
    verdict(4, "per-stage channel totals equal r*C", not bad, ", ".join(bad) or "3 builders x 6 r")


def test_ac05_gradients(verdict):
    worst = {op: gradcheck.worst_error(op) for op in gradcheck.OPS}
    top = max(worst, key=worst.get)
    verdict(5, f"finite differences, 64-bit, step {gradcheck.STEP}, {gradcheck.TRIALS} trials per op, rel err < 1e-4",
            worst[top] < gradcheck.TOL, f"{len(worst)} ops, worst {top} {worst[top]:.2e}")


def test_ac06_grouped_conv(verdict):
    rng = np.random.default_rng(6)
    worst = loop_dev = 0.0
    for _ in range(50):
        g = int(rng.integers(1, 6))
        Cg, Og, K = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.standard_normal((2, g * Cg, 7, 6)).astype(np.float32)
        w = rng.standard_normal((g * Og, Cg, K, K)).astype(np.float32)
        out, _ = ops.conv2d_forward(x, w, None, stride, g)
        ref = np.concatenate([ops.conv2d_forward(x[:, i * Cg:(i + 1) * Cg], w[i * Og:(i + 1) * Og], None, stride)[0]
                              for i in range(g)], axis=1)
        worst = max(worst, float(np.abs(out - ref).max()))
        # and both against a nested-loop reference in float64
        loop = naive_conv(x.astype(np.float64), w.astype(np.float64), None, stride, g)
        loop_dev = max(loop_dev, float(np.abs(out - loop).max()))
    verdict(6, "grouped conv == concatenated slice convs (max abs < 1e-6)", worst < 1e-6 and loop_dev < 1e-4,
            f"max abs vs slices {worst:.1e}, vs float64 loop {loop_dev:.1e}")


def test_ac07_protocol(verdict):
    want = {500: 200, 200: 200, 100: 200, 50: 400, 20: 1000, 10: 2000, 5: 4000, 1: 20000}
    got = {k: epochs_for_ipc(k) for k in want}
    ok = max_lr_for_batch(128) == 5e-3 and got == want
    verdict(7, "max_lr_for_batch(128)=5e-3 and IPC epoch grid", ok, f"epochs {got}")


def test_ac08_diagnostics(verdict):
    rng = np.random.default_rng(8)
    cka_dev = 0.0
    invariance_dev = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 65))
        X = rng.standard_normal((n, int(rng.integers(1, 9))))
        Y = rng.standard_normal((n, int(rng.integers(1, 9)))) + X[:, :1]
        cka_dev = max(cka_dev, abs(linear_cka(X, Y) - cka_brute(X, Y)))
        Q, _ = np.linalg.qr(rng.standard_normal((X.shape[1],) * 2))
        for v in (linear_cka(X, X), linear_cka(X, X @ Q), linear_cka(X, 3.7 * X)):
            invariance_dev = max(invariance_dev, abs(v - 1))
        invariance_dev = max(invariance_dev, abs(linear_cka(X, Y) - linear_cka(Y, X)))
    exact = True
    for seed in range(30):
        logits, labels = path_fixture(seed)
        po = PathOutputs(logits, labels)
        exact &= oracle_accuracy(po) == oracle_brute(logits, labels)
        exact &= cumulative_curves(po) == curves_brute(logits, labels)[0]
    g = mn_transform(arch.build_micro_cnn([8, 16], 4), 2)
    state = init_state(g, 1)
    state.params["s0.norm"]["bias"][::2] = -40.0
    ds = synth_dataset(4, 16)
    exact &= dead_neuron_ratio(g, state, ds) == dnr_brute(g, state, ds.images)
    ok = exact and cka_dev < 1e-10 and invariance_dev < 1e-10
    verdict(8, "CKA/DNR/oracle/curves == brute force; CKA invariances", ok,
            f"CKA dev {cka_dev:.1e}, invariance dev {invariance_dev:.1e}, exact={exact}")


def test_ac09_path_separation(verdict, monkeypatch):
    monkeypatch.setenv("MNLAB_DETERMINISTIC", "1")
    g = mn_transform(arch.build_resnet18(num_classes=10, base_width=8, blocks=(1, 1)), 2)
    state = init_state(g, 9)
    x = np.random.default_rng(9).standard_normal((4, 3, 16, 16)).astype(np.float32)
    ok = True
    for mode in (EVAL, "train"):
        ref = forward(g, state.copy(), x, mode).path_logits
        for m in range(g.M):
            pl = forward(g, zero_path(g, state, m), x, mode).path_logits
            others = [k for k in range(g.M) if k != m]
            ok &= np.array_equal(pl[:, others], ref[:, others]) and not np.array_equal(pl[:, m], ref[:, m])
    verdict(9, "zeroing one path changes only that path's logits (bitwise)", ok, f"M={g.M}, eval+train")


def test_ac10_end_to_end(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("MNLAB_DETERMINISTIC", "1")
    cfg = SweepConfig(
        out_dir=str(tmp_path / "sweep"),
        builder={"name": "micro_cnn", "args": {"widths": [16, 32]}},
        r_grid=[1, 4],
        ipc_grid=[32],
        seeds=[0, 1, 2],
        dataset={"kind": "synthetic", "classes": 4, "samples_per_class": 32, "test_per_class": 32},
        train={"batch_size": 32, "epochs": 30, "augmentation": False},
    )
    out = run_sweep(cfg)
    paths = emit_report(cfg.out_dir)
    problems = [f"{k}: {v}" for k, v in out.failures.items()]
    train_accs, margins = [], []
    for cell in sorted(Path(cfg.out_dir, "cells").iterdir()):
        res = validate_json(cell / "result.json")
        diag = validate_json(cell / "diag.json")
        validate_csv(cell / "history.csv")
        train_accs.append(res["train_accuracy"])
        if res["r"] > 1:
            margins.append(diag["oracle_accuracy"] - max(diag["per_path_accuracy"]))
    for name, p in paths.items():
        validate_json(p) if name in JSON_SCHEMAS else validate_csv(p)
    ok = (not problems and len(train_accs) == 6 and min(train_accs) >= 0.95 and min(margins) >= 0)
    verdict(10, "sweep r{1,4} x 32/class x 3 seeds converges, oracle >= best path, reports validate", ok,
            f"min train acc {min(train_accs, default=0):.3f}, min oracle margin {min(margins, default=-1):.3f}"
            + (f", failures {problems}" if problems else ""))


CIFAR_ENV = "MNLAB_CIFAR10_DIR"


@pytest.mark.skipif(not os.environ.get(CIFAR_ENV), reason=f"optional trend run; set {CIFAR_ENV} to a cifar-10-batches-bin dir")
def test_ac11_optional_trend(verdict, tmp_path):
    root = Path(os.environ[CIFAR_ENV])
    cfg = SweepConfig(
        out_dir=str(tmp_path / "trend"),
        builder={"name": "resnet18", "args": {"base_width": 16, "blocks": [1, 1, 1]}},
        r_grid=[1, 4],
        ipc_grid=[10],
        seeds=[0],
        dataset={"kind": "cifar", "variant": "10",
                 "train": [str(root / f"data_batch_{i}.bin") for i in range(1, 6)],
                 "test": str(root / "test_batch.bin")},
        train={"batch_size": 50, "epochs": int(os.environ.get("MNLAB_TREND_EPOCHS", "100"))},
    )
    out = run_sweep(cfg)
    gaps = {}
    full = True
    for cell in Path(cfg.out_dir, "cells").iterdir():
        diag = validate_json(cell / "diag.json")
        full &= len(diag["per_path_accuracy"]) == diag["M"]
        gaps[diag["r"]] = diag["oracle_accuracy"] - diag["aggregated_accuracy"]
    ok = out.ok and full and gaps.get(4, -1) > gaps.get(1, 0)
    verdict(11, "optional trend: oracle-test gap larger at r=4 than r=1", ok, f"gaps {gaps}")

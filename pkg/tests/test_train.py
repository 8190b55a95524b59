import numpy as np
import pytest

from mnlab.data import synth_dataset
from mnlab.engine import init_state, load_checkpoint
from mnlab.schemas import validate_csv
from mnlab.train import (
    TrainConfig,
    TrainingDiverged,
    cosine_lr,
    epochs_for_ipc,
    max_lr_for_batch,
    no_decay_set,
    optimizer_step,
    read_history,
    train,
)
from mnlab.transform import mn_transform

from conftest import micro


def test_protocol_formulas():
    assert max_lr_for_batch(128) == 5e-3
    assert max_lr_for_batch(64) == 2.5e-3
    assert {ipc: epochs_for_ipc(ipc) for ipc in (500, 200, 100, 50, 20, 10, 5, 1)} == {
        500: 200, 200: 200, 100: 200, 50: 400, 20: 1000, 10: 2000, 5: 4000, 1: 20000}
    with pytest.raises(ValueError):
        epochs_for_ipc(0)
    with pytest.raises(ValueError):
        max_lr_for_batch(0)


def test_cosine():
    assert cosine_lr(0, 10, 1.0) == 1.0
    assert cosine_lr(5, 10, 1.0) == pytest.approx(0.5)
    assert cosine_lr(10, 10, 1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lion")
    with pytest.raises(ValueError):
        TrainConfig(max_lr=-1)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})
    assert TrainConfig(batch_size=256).peak_lr == 1e-2
    assert TrainConfig().resolved_epochs(50) == 400
    assert TrainConfig(epochs=3).resolved_epochs(None) == 3


def test_no_decay_set():
    g = micro()
    nd = no_decay_set(g)
    assert ("s0.norm", "weight") in nd and ("head", "bias") in nd
    assert ("s0.conv", "weight") not in nd and ("head", "weight") not in nd


def test_adamw_first_step_by_hand():
    g = micro()
    state = init_state(g, 0, "float64")
    w0 = state.params["s0.conv"]["weight"].copy()
    b0 = state.params["head"]["bias"].copy()
    grads = {lid: {n: np.full_like(p, 0.5) for n, p in d.items()} for lid, d in state.params.items()}
    cfg = TrainConfig(weight_decay=0.1)
    optimizer_step(state, grads, cfg, 1, lr=0.01, no_decay=no_decay_set(g))
    # step 1: mhat = g, vhat = g^2, so the Adam move is lr * g / (|g| + eps)
    move = 0.01 * 0.5 / (0.5 + 1e-8)
    np.testing.assert_allclose(state.params["s0.conv"]["weight"], w0 * (1 - 0.01 * 0.1) - move, rtol=1e-12)
    np.testing.assert_allclose(state.params["head"]["bias"], b0 - move, rtol=1e-12)


def test_sgd_step_by_hand():
    g = micro()
    state = init_state(g, 0, "float64")
    w0 = state.params["s0.conv"]["weight"].copy()
    grads = {lid: {n: np.ones_like(p) for n, p in d.items()} for lid, d in state.params.items()}
    cfg = TrainConfig(optimizer="sgd", weight_decay=0.01)
    optimizer_step(state, grads, cfg, 1, lr=0.1, no_decay=no_decay_set(g))
    np.testing.assert_allclose(state.params["s0.conv"]["weight"], w0 - 0.1 * (1 + 0.01 * w0), rtol=1e-12)


def _data(per_class=32, seed=0):
    ds = synth_dataset(4, per_class, seed=seed)
    return type(ds)(ds.images, ds.labels, ds.class_count, ipc=per_class, provenance=ds.provenance)


def test_zero_lr_keeps_weights():
    g = micro()
    ds = _data(8)
    start = init_state(g, 0)
    ref = start.copy()
    res = train(g, ds, None, TrainConfig(batch_size=16, max_lr=0.0, epochs=2, weight_decay=0.5), state=start)
    for lid, name, p in res.state.named_params():
        np.testing.assert_array_equal(p, ref.params[lid][name])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    ds = _data(8)
    ds.images[3, 0, 0, 0] = np.inf
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(micro(), ds, None, TrainConfig(batch_size=8, epochs=1, augmentation=False))


@pytest.mark.parametrize("r", [1, 2])
def test_smoke_convergence_and_run_dir(tmp_path, r):
    g = mn_transform(micro(), r)
    cfg = TrainConfig(batch_size=32, epochs=25, augmentation=False, seed=1)
    res = train(g, _data(), _data(16, seed=5), cfg, out_dir=tmp_path)
    assert res.final["train_acc"] >= 0.95
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    for f in ("config.json", "graph.json", "history.csv", "meta.json", "checkpoint.mnck"):
        assert (tmp_path / f).exists()
    validate_csv(tmp_path / "history.csv")
    hist = read_history(tmp_path / "history.csv")
    assert [h["epoch"] for h in hist] == list(range(1, 26))
    assert hist[-1]["lr"] == pytest.approx(cosine_lr(25 * 4 - 1, 25 * 4, cfg.peak_lr))
    g2, _, extra = load_checkpoint(tmp_path / "checkpoint.mnck")
    assert g2 == g and len(extra["norm_mean"]) == 3


def test_training_is_deterministic():
    g = mn_transform(micro(), 2)
    cfg = TrainConfig(batch_size=32, epochs=2, seed=3)
    a = train(g, _data(), None, cfg)
    b = train(g, _data(), None, cfg)
    for lid, name, p in a.state.named_params():
        assert p.tobytes() == b.state.params[lid][name].tobytes()


def test_class_mismatch():
    with pytest.raises(ValueError, match="classes"):
        train(micro(num_classes=3), _data(4), None, TrainConfig(epochs=1))

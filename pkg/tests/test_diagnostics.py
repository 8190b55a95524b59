import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mnlab.data import synth_dataset
from mnlab.diagnostics import (
    DiagnosticsError,
    PathOutputs,
    cumulative_curves,
    dead_neuron_ratio,
    diagnose,
    group_cka_matrix,
    layerwise_group_cka,
    linear_cka,
    mean_pairwise,
    oracle_accuracy,
    path_orderings,
    write_diagnostics,
)
from mnlab.engine import init_state
from mnlab.schemas import validate_csv, validate_json
from mnlab.transform import mn_transform

from conftest import micro, tiny_resnet
from oracles import cka_brute, curves_brute, dnr_brute, oracle_brute, path_fixture

# -- CKA ------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(25))
def test_linear_cka_matches_hsic(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 65))
    X = rng.standard_normal((n, int(rng.integers(1, 9))))
    Y = rng.standard_normal((n, int(rng.integers(1, 9)))) + 0.3 * X[:, :1]
    assert abs(linear_cka(X, Y) - cka_brute(X, Y)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(
    X=arrays(np.float64, (12, 4), elements=st.floats(-10, 10)),
    seed=st.integers(0, 10_000),
    scale=st.floats(1e-3, 1e3),
)
def test_cka_invariances(X, seed, scale):
    if np.linalg.norm((X - X.mean(0)).T @ (X - X.mean(0))) < 1e-6:
        assert linear_cka(X, X) is None or abs(linear_cka(X, X) - 1) < 1e-9
        return
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    Y = rng.standard_normal((12, 3))
    assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-9)
    assert linear_cka(X, X @ Q) == pytest.approx(1.0, abs=1e-9)
    assert linear_cka(X, scale * X) == pytest.approx(1.0, abs=1e-9)
    assert linear_cka(X, Y) == pytest.approx(linear_cka(Y, X), abs=1e-12)
    assert -1e-12 <= linear_cka(X, Y) <= 1 + 1e-12


def test_cka_undefined_and_errors():
    assert linear_cka(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2))) is None
    with pytest.raises(DiagnosticsError):
        linear_cka(np.zeros((5, 2)), np.zeros((4, 2)))
    with pytest.raises(DiagnosticsError):
        linear_cka(np.zeros((1, 2)), np.zeros((1, 2)))


def test_group_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((30, 12))
    F[:, 3:6] = 0  # group 1 constant -> undefined
    mat = group_cka_matrix(F, 4, chunk=3)
    for a in range(4):
        for b in range(4):
            ref = linear_cka(F[:, 3 * a:3 * a + 3], F[:, 3 * b:3 * b + 3])
            if ref is None:
                assert np.isnan(mat[a, b])
            else:
                assert abs(mat[a, b] - ref) < 1e-10
    mean, pairs, undefined = mean_pairwise(mat)
    assert (pairs, undefined) == (6, 3)
    assert mean == pytest.approx(np.mean([mat[0, 2], mat[0, 3], mat[2, 3]]))
    with pytest.raises(DiagnosticsError):
        group_cka_matrix(F, 5)


# -- path outputs -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(30))
def test_oracle_and_curves_match_brute_force(seed):
    logits, labels = path_fixture(seed)
    po = PathOutputs(logits, labels)
    assert oracle_accuracy(po) == oracle_brute(logits, labels)
    curves, orders = curves_brute(logits, labels)
    assert path_orderings(po) == orders
    assert cumulative_curves(po) == curves


def test_oracle_dominates_paths():
    for seed in range(20):
        po = PathOutputs(*path_fixture(seed))
        assert oracle_accuracy(po) >= po.per_path_accuracy.max()
        c = cumulative_curves(po)
        assert c["BestFirst"][0] == po.per_path_accuracy.max()
        assert c["WorstFirst"][0] == po.per_path_accuracy.min()
        assert c["BestFirst"][-1] == c["WorstFirst"][-1] == c["Original"][-1] == po.aggregated_accuracy


def test_prob_aggregation_scores():
    logits = np.array([[[3.0, 0.0], [0.0, 1.0], [0.0, 1.0]]])
    assert PathOutputs(logits, [0], "logit").aggregated_predictions()[0] == 0
    assert PathOutputs(logits, [1], "prob").aggregated_predictions()[0] == 1


def test_path_outputs_shape_check():
    with pytest.raises(DiagnosticsError):
        PathOutputs(np.zeros((3, 2)), [0, 1, 2])


# -- layer statistics ---------------------------------------------------------------------


@pytest.mark.parametrize("r", [1, 2])
def test_dead_neuron_ratio_matches_brute_force(r):
    g = mn_transform(micro(), r)
    state = init_state(g, 1)
    beta = state.params["s0.norm"]["bias"]
    beta[::3] = -50.0  # force these channels to zero after the ReLU
    ds = synth_dataset(4, 6, seed=2)
    got = dead_neuron_ratio(g, state, ds, batch_size=7)
    assert got == dnr_brute(g, state, ds.images)
    assert got[0]["dead"] >= len(range(0, 16 * r, 3))


def test_layer_selection_errors():
    g = micro()
    ds = synth_dataset(4, 2)
    with pytest.raises(DiagnosticsError):
        layerwise_group_cka(g, init_state(g), ds, ["head"])
    with pytest.raises(DiagnosticsError):
        layerwise_group_cka(g, init_state(g), ds, ["nope"])


def test_layerwise_cka_groups():
    g1, g4 = micro(), mn_transform(micro(), 2)
    ds = synth_dataset(4, 8)
    rows1 = layerwise_group_cka(g1, init_state(g1), ds, ref_groups=4)
    rows4 = layerwise_group_cka(g4, init_state(g4), ds, full_matrix=True)
    assert [r["groups"] for r in rows1] == [4, 4]
    assert [r["groups"] for r in rows4] == [4, 4]
    assert len(rows4[0]["matrix"]) == 4


def test_identical_paths_have_cka_one():
    g = mn_transform(micro(), 2)
    state = init_state(g, 0, identical_paths=True)
    rows = layerwise_group_cka(g, state, synth_dataset(4, 8))
    for row in rows:
        assert row["mean_cka"] == pytest.approx(1.0, abs=1e-6)


def test_diagnose_writes_valid_files(tmp_path):
    g = mn_transform(tiny_resnet(4), 2)
    ds = synth_dataset(4, 6)
    rep = diagnose(g, init_state(g), ds)
    assert len(rep.per_path_accuracy) == 4
    assert rep.oracle_accuracy >= max(rep.per_path_accuracy)
    write_diagnostics(rep, tmp_path / "diag.json")
    validate_json(tmp_path / "diag.json")
    for name in ("cka_layerwise.csv", "dnr_layerwise.csv", "cumulative_curves.csv", "paths.csv"):
        validate_csv(tmp_path / name)
    with pytest.raises(DiagnosticsError):
        diagnose(g, init_state(g), ds.take([]))

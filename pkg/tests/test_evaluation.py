import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdisjoint.attacks import AttackSpec, preset, run_attack
from advdisjoint.data import make_templates
from advdisjoint.evaluation import (SetMetrics, TransferMatrix, clean_accuracies, craft, ensemble_attack_eval,
                                    ensemble_campaign, ensemble_size_curve, epsilon_sweep,
                                    evaluate_on_members, export_gradient_signs, gradient_signs,
                                    separation_score, set_metrics, transfer_matrix)
from advdisjoint.models import ModelConfig, ModelSet, accuracy, init_model, new_set

CFG = ModelConfig("mlp", (1, 4, 4), 4, (10,))
DATA = make_templates(classes=4, n=60, shape=(1, 4, 4), amplitude=0.3, sigma=0.1, seed=2)
SET = new_set(CFG, 3, seeds=[0, 1, 2])
SPEC = preset("pgd1", rng_seed=1)


def test_single_member_matrix_is_whitebox_only():
    m = transfer_matrix(new_set(CFG, 1), SPEC, DATA)
    assert m.accuracy.shape == (1, 1)
    x_adv, _ = run_attack(new_set(CFG, 1).member(0), DATA.x, DATA.y, SPEC)
    assert m.accuracy[0, 0] == accuracy(new_set(CFG, 1).member(0), x_adv, DATA.y)


def test_zero_budget_matrix_equals_clean_accuracy_per_column():
    m = transfer_matrix(SET, AttackSpec("pgd", eps=0.0, alpha=0.0, steps=1), DATA)
    clean = clean_accuracies(SET, DATA)
    for i in range(3):
        np.testing.assert_array_equal(m.accuracy[i], clean)


def test_diagonal_equals_independent_whitebox_evaluation():
    m = transfer_matrix(SET, SPEC, DATA)
    for i in range(3):
        x_adv, _ = run_attack(SET.member(i), DATA.x, DATA.y, SPEC)
        assert m.accuracy[i, i] == accuracy(SET.member(i), x_adv, DATA.y)
        assert m.accuracy[i, (i + 1) % 3] == accuracy(SET.member((i + 1) % 3), x_adv, DATA.y)
    assert ((0 <= m.accuracy) & (m.accuracy <= 1)).all()


def test_single_member_ensemble_equals_matrix_row():
    m = transfer_matrix(SET, SPEC, DATA)
    for i in range(3):
        np.testing.assert_array_equal(ensemble_attack_eval(SET, [i], SPEC, DATA), m.accuracy[i])
    with pytest.raises(ValueError):
        ensemble_attack_eval(SET, [], SPEC, DATA)
    with pytest.raises(ValueError):
        ensemble_attack_eval(SET, [3], SPEC, DATA)


def test_campaign_enumerates_all_subsets():
    rows = ensemble_campaign(SET, SPEC, DATA)
    assert [tuple(r["subset"]) for r in rows] == [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)]
    assert rows[-1]["excluded_mean"] is None
    curve = ensemble_size_curve(rows)
    assert sorted(curve) == [1, 2, 3]
    assert curve[1] == pytest.approx(np.mean([r["mean"] for r in rows[:3]]))


def test_metrics_arithmetic():
    a = np.full((3, 3), 0.9)
    np.fill_diagonal(a, 0.0)
    m = set_metrics(TransferMatrix(a, 10))
    assert m.wholeset_mean == pytest.approx(0.6)
    assert m.blackbox_mean == pytest.approx(0.9) and m.blackbox_std == pytest.approx(0.0)
    assert m.whitebox_mean == 0.0
    eq = set_metrics(TransferMatrix(np.full((4, 4), 0.37), 10))
    assert eq.blackbox_mean == pytest.approx(0.37) and eq.wholeset_mean == pytest.approx(0.37)
    assert eq.blackbox_std == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10**6))
def test_metric_identities(n, seed):
    a = np.random.default_rng(seed).uniform(size=(n, n))
    m = set_metrics(TransferMatrix(a, 1))
    off = a[~np.eye(n, dtype=bool)]
    assert m.wholeset_mean == pytest.approx((np.trace(a) + off.sum()) / n ** 2, rel=1e-12)
    assert m.whitebox_mean == pytest.approx(np.trace(a) / n, rel=1e-12)
    if n > 1:
        assert m.blackbox_std >= 0
        assert m.blackbox_mean == pytest.approx(off.mean(), rel=1e-12)


def test_matrix_file_round_trips_exactly(tmp_path):
    m = transfer_matrix(SET, SPEC, DATA)
    m.write_csv(tmp_path / "m.csv")
    back = TransferMatrix.read_csv(tmp_path / "m.csv", m.samples, m.attack)
    np.testing.assert_array_equal(back.accuracy, m.accuracy)
    assert set_metrics(back).to_json() == set_metrics(m).to_json()
    assert TransferMatrix.from_json(m.to_json()).accuracy.tolist() == m.accuracy.tolist()
    with open(tmp_path / "m.csv") as f:
        assert next(csv.reader(f)) == ["source", "target_0", "target_1", "target_2"]


def test_craft_cache_reuses_examples(tmp_path):
    a = craft(SET, [0, 1], SPEC, DATA, tmp_path)
    assert len(list(tmp_path.glob("adv-*.npy"))) == 1
    b = craft(SET, [0, 1], SPEC, DATA, tmp_path)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, craft(SET, [0, 1], SPEC, DATA))


def test_epsilon_sweep_shape_and_zero_sentinel():
    out = epsilon_sweep(SET, [0.0, 0.05, 0.2], DATA, steps=5)
    assert [e for e, _ in out] == [0.0, 0.05, 0.2]
    clean = np.mean(clean_accuracies(SET, DATA))
    assert out[0][1].wholeset_mean == pytest.approx(clean)
    assert out[2][1].wholeset_mean <= out[0][1].wholeset_mean
    with pytest.raises(ValueError):
        epsilon_sweep(SET, [0.1, 0.05], DATA)
    with pytest.raises(ValueError):
        epsilon_sweep(SET, [-0.1], DATA)


def test_identical_members_score_chance_separation():
    twins = ModelSet(CFG, [init_model(CFG, 7)] * 3)
    assert export_gradient_signs(twins, DATA, 20) == pytest.approx(1 / 3)


def test_distinct_members_separate():
    signs, images, members = gradient_signs(SET, DATA, 20)
    assert set(np.unique(signs)) <= {-1, 1}
    assert separation_score(signs, images, members) > 1 / 3


def test_separation_score_uses_hamming_neighbours():
    signs = np.array([[1, 1, 1, 1], [-1, -1, -1, -1], [1, 1, 1, -1], [-1, -1, 1, -1]])
    images = np.array([0, 0, 1, 1])
    members = np.array([0, 1, 0, 1])
    assert separation_score(signs, images, members) == 1.0


def test_gradient_sign_csv_layout(tmp_path):
    path = tmp_path / "g.csv"
    export_gradient_signs(SET, DATA, 5, path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["image_id", "member_id", "s0"]
    assert len(rows[0]) == 2 + 16 and len(rows) == 1 + 5 * 3
    with pytest.raises(ValueError):
        export_gradient_signs(SET, DATA, 1000)


def test_evaluation_is_deterministic():
    a = transfer_matrix(SET, SPEC, DATA).accuracy
    b = transfer_matrix(SET, SPEC, DATA).accuracy
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(evaluate_on_members(SET, DATA.x, DATA.y), clean_accuracies(SET, DATA))

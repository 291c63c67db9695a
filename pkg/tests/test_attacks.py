import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdisjoint import autodiff as ad
from advdisjoint.attacks import (TABLE1, AttackError, AttackSpec, fgm, fgsm, loss_gradient, margin, mifgsm,
                                 pgd, preset, rfgsm, run_attack, soft_threshold)
from advdisjoint.autodiff import Tensor
from advdisjoint.models import ModelConfig, init_model, Member


def linear(W, b=None):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)

    def model(t):
        return ad.add(ad.matmul(ad.reshape(t, (len(t), -1)), Tensor(W.astype(t.dtype))),
                      Tensor(b.astype(t.dtype)))

    return model


def numpy_ce_grad(W, b, x, y):
    z = x @ W + b
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return p @ W.T


MLP = ModelConfig("mlp", (3, 4, 4), 5, (16,))
NET = Member(init_model(MLP, 0), MLP)
RNG = np.random.default_rng(11)
X = RNG.uniform(0, 1, (64, 3, 4, 4)).astype(np.float32)
Y = RNG.integers(0, 5, 64)


def test_table1_presets():
    assert TABLE1["fgsm"].eps == 0.031
    assert TABLE1["fgm"].eps == 1.0
    assert TABLE1["rfgsm"].alpha == pytest.approx(0.031 / 2)
    assert (TABLE1["pgd1"].alpha, TABLE1["pgd1"].steps, TABLE1["pgd2"].steps) == (0.0078, 7, 20)
    m1, m2 = TABLE1["mifgsm1"], TABLE1["mifgsm2"]
    assert (m1.alpha, m1.mu, m1.steps, m2.steps) == (0.0031, 1.0, 10, 20)
    assert (TABLE1["cw1"].c, TABLE1["cw1"].kappa, TABLE1["cw2"].kappa) == (1.0, 0.0, 40.0)
    assert TABLE1["cw1"].max_iterations == 1000 and TABLE1["cw1"].learning_rate == 0.01
    assert TABLE1["cw1"].optimizer == "adam"
    e1, e2 = TABLE1["ead1"], TABLE1["ead2"]
    assert (e1.c, e1.kappa, e2.c, e2.kappa, e1.beta) == (20.0, 0.0, 10.0, 55.0, 0.01)
    assert e1.decision_rule == "EN" and e1.optimizer == "sgd"


def test_spec_validation():
    with pytest.raises(AttackError):
        AttackSpec("fgsm", eps=-1)
    with pytest.raises(AttackError):
        AttackSpec("pgd", steps=0)
    with pytest.raises(AttackError):
        AttackSpec("cw", kappa=-1)
    with pytest.raises(AttackError):
        AttackSpec("deepfool")
    with pytest.raises(AttackError):
        AttackSpec.from_dict({"kind": "fgsm", "epsilon": 0.1})
    with pytest.raises(AttackError):
        preset("pgd3")
    spec = preset("ead2", rng_seed=4)
    assert AttackSpec.from_dict(spec.to_dict()) == spec


def test_fgsm_on_logistic_model_follows_analytic_gradient():
    # two-class linear model with logits (0, w.x); label 0 loss gradient is p1 * w
    w = np.array([1.0, -2.0])
    model = linear(np.stack([np.zeros(2), w], axis=1))
    x = np.array([[0.5, 0.5]])
    z = w @ x[0]
    p1 = np.exp(z) / (1 + np.exp(z))
    np.testing.assert_allclose(loss_gradient(model, x, np.array([0]))[0], p1 * w, rtol=1e-12)
    out = fgsm(model, x, np.array([0]), preset("fgsm"))
    np.testing.assert_allclose(out[0], x[0] + 0.031 * np.sign(w), rtol=1e-12)


def test_fgm_unit_normalisation():
    # loss gradient proportional to (3, 4) -> unit step (0.6, 0.8)
    model = linear(np.stack([np.zeros(2), [3.0, 4.0]], axis=1))
    x = np.array([[0.2, 0.1]])
    out = fgm(model, x, np.array([0]), preset("fgm"))
    np.testing.assert_allclose(out[0] - x[0], [0.6, 0.8], atol=1e-12)


def test_fgm_zero_gradient_leaves_input():
    model = linear(np.zeros((2, 2)))
    x = np.array([[0.2, 0.1]])
    np.testing.assert_array_equal(fgm(model, x, np.array([0]), preset("fgm")), x)


@pytest.mark.parametrize("kind", ["fgsm", "fgm", "rfgsm", "pgd", "mifgsm"])
def test_zero_budget_is_identity(kind):
    spec = AttackSpec(kind, eps=0.0, alpha=0.0)
    out, _ = run_attack(NET, X, Y, spec)
    np.testing.assert_array_equal(out, X)


def test_rfgsm_degenerate_cases():
    x, y = X[:8], Y[:8]
    np.testing.assert_array_equal(rfgsm(NET, x, y, preset("rfgsm", alpha=0.0)), fgsm(NET, x, y, preset("fgsm")))
    with pytest.raises(AttackError):
        rfgsm(NET, x, y, preset("rfgsm", alpha=0.05))
    a, _ = run_attack(NET, x, y, preset("rfgsm", rng_seed=2))
    b, _ = run_attack(NET, x, y, preset("rfgsm", rng_seed=2))
    c, _ = run_attack(NET, x, y, preset("rfgsm", rng_seed=3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pgd_single_step_without_start_is_fgsm():
    spec = preset("pgd1", random_start=False, steps=1, alpha=0.031)
    np.testing.assert_array_equal(pgd(NET, X, Y, spec), fgsm(NET, X, Y, preset("fgsm")))


def test_mifgsm_single_step_without_momentum_is_fgsm():
    spec = preset("mifgsm1", mu=0.0, steps=1, alpha=0.031)
    np.testing.assert_array_equal(mifgsm(NET, X, Y, spec), fgsm(NET, X, Y, preset("fgsm")))


def test_mifgsm_momentum_matches_hand_unrolled_recurrence():
    rng = np.random.default_rng(5)
    W, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    x = rng.uniform(0.2, 0.8, (2, 4))
    y = np.array([0, 2])
    spec = AttackSpec("mifgsm", eps=0.5, alpha=0.05, mu=0.7, steps=3)
    trace = []
    out = mifgsm(linear(W, b), x, y, spec, trace=trace)
    v, cur = np.zeros_like(x), x.copy()
    for t in range(3):
        g = numpy_ce_grad(W, b, cur, y)
        v = 0.7 * v + g / np.abs(g).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(trace[t], v, rtol=1e-10)
        cur = np.clip(np.clip(cur + 0.05 * np.sign(v), x - 0.5, x + 0.5), 0, 1)
    np.testing.assert_allclose(out, cur, rtol=1e-12)


def test_loss_gradient_is_per_sample():
    """The summed loss gives each row its own sample's gradient, independent of batch size."""
    rng = np.random.default_rng(2)
    W, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    x = rng.uniform(size=(5, 4))
    y = rng.integers(0, 3, 5)
    np.testing.assert_allclose(loss_gradient(linear(W, b), x, y), numpy_ce_grad(W, b, x, y), rtol=1e-10)


def _grid_min_distance(w, b, x, kappa, res=1e-3):
    g = np.arange(0.0, 1.0 + res / 2, res)
    g0, g1 = np.meshgrid(g, g, indexing="ij")
    feasible = w[0] * g0 + w[1] * g1 + b >= kappa
    return np.sqrt((g0 - x[0]) ** 2 + (g1 - x[1]) ** 2)[feasible].min()


@pytest.mark.parametrize("kappa", [0.0, 1.0])
def test_cw_finds_minimal_distance_on_linear_model(kappa):
    """Against a brute-force grid over the unit square: the CW result sits on the kappa-shifted boundary."""
    w, b = np.array([4.0, -3.0]), -0.5
    model = linear(np.stack([np.zeros(2), w], axis=1), [0.0, b])
    x = np.array([[0.3, 0.6], [0.2, 0.2]])
    out, ok = run_attack(model, x, np.array([0, 0]), preset("cw1", kappa=kappa))
    assert ok.all()
    for k in range(2):
        assert w @ out[k] + b >= kappa
        assert np.linalg.norm(out[k] - x[k]) == pytest.approx(_grid_min_distance(w, b, x[k], kappa), abs=2e-3)


def test_cw_zero_tradeoff_stays_at_input():
    out, ok = run_attack(NET, X[:4], Y[:4], preset("cw1", c=0.0, max_iterations=50))
    np.testing.assert_allclose(out, X[:4], atol=1e-5)


def test_ead_on_linear_model_reaches_kappa_margin():
    w, b = np.array([4.0, -3.0]), -0.5
    model = linear(np.stack([np.zeros(2), w], axis=1), [0.0, b])
    x = np.array([[0.3, 0.6]])
    out, ok = run_attack(model, x, np.array([0]), preset("ead1", kappa=0.5, max_iterations=300))
    assert ok[0] and w @ out[0] + b >= 0.5
    assert 0 <= out.min() and out.max() <= 1


def test_soft_threshold():
    np.testing.assert_array_equal(soft_threshold(np.array([-0.3, -0.01, 0.0, 0.005, 0.2]), 0.01),
                                  [-0.29, 0.0, 0.0, 0.0, 0.19])


def test_margin_definition():
    logits = np.array([[2.0, 1.0, 0.5], [0.0, 3.0, 1.0]])
    np.testing.assert_array_equal(margin(logits, np.array([0, 0])), [1.0, -3.0])
    np.testing.assert_array_equal(margin(logits, np.array([0, 0]), target=2), [1.5, 2.0])


def test_targeted_fgsm_moves_toward_target():
    before = np.mean(np.argmax(NET(Tensor(X)).data, axis=1) == 1)
    out, hit = run_attack(NET, X, Y, AttackSpec("pgd", eps=0.3, alpha=0.05, steps=20, target=1))
    after = np.mean(np.argmax(NET(Tensor(out)).data, axis=1) == 1)
    assert after > before
    np.testing.assert_array_equal(hit, np.argmax(NET(Tensor(out)).data, axis=1) == 1)


def test_chunking_does_not_change_results():
    spec = preset("pgd1", rng_seed=9)
    a, _ = run_attack(NET, X, Y, spec, chunk=7)
    b, _ = run_attack(NET, X, Y, spec, chunk=64)
    np.testing.assert_array_equal(a, b)


def test_empty_batch():
    out, ok = run_attack(NET, X[:0], Y[:0], preset("pgd1"))
    assert out.shape == (0, 3, 4, 4) and ok.shape == (0,)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["fgsm", "rfgsm", "pgd1", "pgd2", "mifgsm1", "mifgsm2"]),
       st.floats(0.0, 0.2), st.integers(0, 1000))
def test_linf_attacks_stay_in_ball_and_box(name, eps, seed):
    base = preset(name)
    spec = base.replace(eps=eps, alpha=min(base.alpha, eps) if name == "rfgsm" else base.alpha, rng_seed=seed)
    out, _ = run_attack(NET, X[:16], Y[:16], spec)
    assert np.abs(out - X[:16]).max() <= eps + 1e-6
    assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 3.0), st.integers(0, 1000))
def test_fgm_stays_in_l2_ball(eps, seed):
    out, _ = run_attack(NET, X[:16], Y[:16], preset("fgm", eps=eps, rng_seed=seed))
    norms = np.linalg.norm((out - X[:16]).reshape(16, -1).astype(np.float64), axis=1)
    assert norms.max() <= eps + 1e-4

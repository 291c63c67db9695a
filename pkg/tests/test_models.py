import numpy as np
import pytest

from advdisjoint import autodiff as ad
from advdisjoint.autodiff import Tape, Tensor
from advdisjoint.models import (ModelConfig, ModelSet, accuracy, ensemble_forward, forward, init_model,
                                new_set, param_count, param_shapes, predict)
from oracles import numeric_grad, rel_err

CONV = ModelConfig("small_conv", (2, 4, 4), 3, (2, 3, 5))
MLP = ModelConfig("mlp", (4,), 3, (8,))


def test_param_count_of_mlp():
    # 4*8 + 8 + 8*3 + 3
    assert param_count(MLP) == 67
    assert [name for name, _ in param_shapes(MLP)] == ["dense0.weight", "dense0.bias",
                                                       "dense1.weight", "dense1.bias"]


def test_small_conv_needs_pool_compatible_input():
    with pytest.raises(ValueError):
        ModelConfig("small_conv", (3, 6, 6), 10, (4, 8, 16))
    with pytest.raises(ValueError):
        ModelConfig("resnet", (3, 8, 8), 10, (4,))


def test_forward_rejects_wrong_input_shape():
    params = init_model(CONV, 0)
    with pytest.raises(ad.ShapeError):
        forward(params, Tensor(np.zeros((2, 3, 4, 4))), CONV)


def test_small_conv_forward_gradient_matches_finite_differences():
    """First-order oracle on the whole small_conv forward pass (input and every parameter)."""
    with ad.precision("f64"):
        params = init_model(CONV, 3)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(0, 1, (2, 2, 4, 4))
        y = np.array([0, 2])

        def loss_of(p, x):
            return ad.cross_entropy(forward(p, Tensor(x) if not isinstance(x, Tensor) else x, CONV), y)

        xt = Tensor(x0, requires_grad=True)
        with Tape():
            grads = ad.grad(loss_of(params, xt), [xt] + [params[k] for k, _ in param_shapes(CONV)])
        gx, gparams = grads[0], grads[1:]
        fx = numeric_grad(lambda v: float(loss_of(params, v).data), x0)
        assert rel_err(gx.data, fx) < 1e-4
        for (name, _), g in zip(param_shapes(CONV), gparams):
            base = params[name].data.copy()

            def f(v, name=name):
                params[name].data = v
                out = float(loss_of(params, x0).data)
                params[name].data = base
                return out

            assert rel_err(g.data, numeric_grad(f, base)) < 1e-4, name


def test_init_is_seeded_and_distinct():
    a, b, c = init_model(MLP, 1), init_model(MLP, 1), init_model(MLP, 2)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert not np.array_equal(a["dense0.weight"].data, c["dense0.weight"].data)
    np.testing.assert_array_equal(a["dense0.bias"].data, 0.0)


def test_predict_breaks_ties_toward_lower_index():
    model = lambda x: Tensor(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]))
    np.testing.assert_array_equal(predict(model, np.zeros((2, 1))), [0, 1])
    assert accuracy(model, np.zeros((2, 1)), np.array([0, 2])) == 0.5


def test_ensemble_is_mean_of_member_logits():
    s = new_set(MLP, 3, seeds=[0, 1, 2])
    x = np.random.default_rng(0).uniform(size=(5, 4)).astype(np.float32)
    want = np.mean([s.member(i)(Tensor(x)).data for i in range(3)], axis=0)
    np.testing.assert_allclose(s.ensemble([0, 1, 2])(Tensor(x)).data, want, rtol=1e-6)
    np.testing.assert_array_equal(s.ensemble([1])(Tensor(x)).data, s.member(1)(Tensor(x)).data)
    with pytest.raises(ValueError):
        ensemble_forward([], Tensor(x), MLP)


def test_model_set_validates_members():
    with pytest.raises(ValueError):
        ModelSet(MLP, [])
    with pytest.raises(ValueError):
        ModelSet(MLP, [init_model(CONV, 0)])


def test_fingerprint_tracks_parameters():
    s = new_set(MLP, 2, seeds=[0, 1])
    f0 = s.fingerprint()
    assert new_set(MLP, 2, seeds=[0, 1]).fingerprint() == f0
    s.members[1]["dense0.bias"].data += 1
    assert s.fingerprint() != f0


def test_config_round_trip():
    assert ModelConfig.from_dict(CONV.to_dict()) == CONV

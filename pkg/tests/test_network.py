import numpy as np
import pytest

from spefield.encoding import IdentityEncoding, SplineEncoding
from spefield.network import (
    Checkpoint,
    FieldModel,
    Mlp,
    init_random,
    model_from_config,
    sigmoid,
    softplus,
)

from conftest import finite_difference, relative_error, tiny_model


# -- activations ---------------------------------------------------------------


def test_softplus_matches_naive():
    z = np.linspace(-30.0, 30.0, 101)
    assert np.allclose(softplus(z), np.log(1.0 + np.exp(z)), atol=1e-12)


def test_softplus_stable_at_extremes():
    assert softplus(np.array([800.0]))[0] == 800.0
    assert softplus(np.array([-800.0]))[0] == 0.0
    assert np.all(np.isfinite(softplus(np.array([-1e8, 1e8]))))


def test_sigmoid_matches_naive():
    z = np.linspace(-30.0, 30.0, 101)
    assert np.allclose(sigmoid(z), 1.0 / (1.0 + np.exp(-z)), atol=1e-12)
    assert np.all(np.isfinite(sigmoid(np.array([-800.0, 800.0]))))


# -- Mlp construction -----------------------------------------------------------


def test_mlp_dimension_chain_checked():
    with pytest.raises(ValueError):
        Mlp(weights=[np.zeros((4, 3)), np.zeros((2, 5))],
            biases=[np.zeros(4), np.zeros(2)])
    with pytest.raises(ValueError):
        Mlp(weights=[np.zeros((4, 3))], biases=[np.zeros(5)])


def test_mlp_properties():
    mlp = init_random([3, 8, 8, 1], seed=0)
    assert mlp.in_dim == 3 and mlp.out_dim == 1
    assert mlp.layer_dims == [3, 8, 8, 1]
    assert mlp.param_count() == 3 * 8 + 8 + 8 * 8 + 8 + 8 * 1 + 1


def test_init_random_deterministic():
    a = init_random([3, 16, 1], seed=7)
    b = init_random([3, 16, 1], seed=7)
    c = init_random([3, 16, 1], seed=8)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_random_statistics():
    mlp = init_random([100, 200, 1], seed=0)
    w = mlp.weights[0]
    assert abs(np.var(w) - 2.0 / 100) < 0.2 * 2.0 / 100
    assert all(np.all(b == 0.0) for b in mlp.biases)


# -- forward -------------------------------------------------------------------


def naive_forward(model, x):
    h = model.encoder.encode(np.atleast_2d(x))
    n_layers = len(model.mlp.weights)
    for i, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
        z = h @ w.T + b
        h = np.log1p(np.exp(z)) if i < n_layers - 1 else z
    return h


def test_forward_constant_model(rng):
    model = tiny_model()
    model.mlp.weights[-1][:] = 0.0
    model.mlp.biases[-1][:] = 4.25
    x = rng.uniform(-1, 1, size=(10, 3))
    assert np.allclose(model.forward(x), 4.25, atol=1e-15)


def test_forward_affine_model(rng):
    n = np.array([0.3, -0.7, 0.2])
    mlp = Mlp(weights=[n[None, :].copy()], biases=[np.array([0.9])])
    model = FieldModel(IdentityEncoding(input_dim=3), mlp)
    x = rng.uniform(-1, 1, size=(20, 3))
    assert np.allclose(model.forward(x)[:, 0], x @ n + 0.9, atol=1e-15)
    _, grad = model.forward_with_input_grad(x)
    assert np.allclose(grad, n, atol=1e-15)


def test_forward_matches_naive(rng):
    for kind in ("spe", "fpe", "identity"):
        model = tiny_model(encoder=kind)
        x = rng.uniform(-0.8, 0.8, size=(6, 3))
        assert np.allclose(model.forward(x), naive_forward(model, x), atol=1e-12)


def test_forward_scalar_point(rng):
    model = tiny_model()
    x = rng.uniform(-0.5, 0.5, size=3)
    assert np.allclose(model.forward(x), model.forward(x[None])[0])


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        FieldModel(IdentityEncoding(input_dim=3), init_random([4, 8, 1], seed=0))


# -- input gradient ---------------------------------------------------------------


def test_input_grad_constant_model(rng):
    model = tiny_model()
    model.mlp.weights[-1][:] = 0.0
    x = rng.uniform(-0.5, 0.5, size=(5, 3))
    _, grad = model.forward_with_input_grad(x)
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("kind", ["spe", "fpe", "identity"])
def test_input_grad_finite_difference(rng, kind):
    model = tiny_model(encoder=kind, degree=2)
    x = rng.uniform(-0.5, 0.5, size=(20, 3))
    _, grad = model.forward_with_input_grad(x)
    eps = 1e-6
    for n in range(0, 20, 3):
        for d in range(3):
            hi, lo = x[n].copy(), x[n].copy()
            hi[d] += eps
            lo[d] -= eps
            fd = (model.forward(hi)[0] - model.forward(lo)[0]) / (2 * eps)
            assert relative_error(grad[n, d], np.array(fd)) < 1e-5


def test_input_grad_requires_scalar_output():
    model = tiny_model(out_dim=3)
    with pytest.raises(ValueError):
        model.forward_with_input_grad(np.zeros(3))


# -- parameter gradients ------------------------------------------------------------


def scalarized(model, x, g_value, g_grad):
    if g_grad is None:
        return float(np.sum(g_value * model.forward(x)))
    f, g = model.forward_with_input_grad(x)
    return float(np.sum(g_value[:, 0] * f) + np.sum(g_grad * g))


def backward_matches_fd(model, x, g_value, g_grad, tol):
    exact = model.backward(x, g_value, g_grad)
    p0 = model.get_params()

    def fn(p):
        model.set_params(p)
        s = scalarized(model, x, g_value, g_grad)
        model.set_params(p0)
        return s

    fd = finite_difference(fn, p0, eps=1e-6)
    assert relative_error(exact, fd) < tol


def test_backward_zero_upstreams(rng):
    model = tiny_model()
    x = rng.uniform(-0.5, 0.5, size=(4, 3))
    g = model.backward(x, np.zeros((4, 1)), np.zeros((4, 3)))
    assert np.all(g == 0.0)


@pytest.mark.parametrize("kind", ["spe", "fpe", "identity"])
def test_backward_value_only(rng, kind):
    model = tiny_model(encoder=kind)
    x = rng.uniform(-0.5, 0.5, size=(1, 3))
    g_value = rng.standard_normal((1, 1))
    backward_matches_fd(model, x, g_value, None, 1e-5)


@pytest.mark.parametrize("kind", ["spe", "fpe", "identity"])
def test_backward_with_grad_upstream(rng, kind):
    model = tiny_model(encoder=kind, degree=2)
    x = rng.uniform(-0.5, 0.5, size=(5, 3))
    g_value = rng.standard_normal((5, 1))
    g_grad = rng.standard_normal((5, 3))
    backward_matches_fd(model, x, g_value, g_grad, 1e-4)


def test_backward_multi_output_value_only(rng):
    model = tiny_model(out_dim=3)
    x = rng.uniform(-0.5, 0.5, size=(4, 3))
    g_value = rng.standard_normal((4, 3))
    backward_matches_fd(model, x, g_value, None, 1e-5)


def test_backward_g_grad_rejects_vector_output(rng):
    model = tiny_model(out_dim=2)
    with pytest.raises(ValueError):
        model.backward(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 3)))


def test_backward_with_cache_matches_without(rng):
    model = tiny_model()
    x = rng.uniform(-0.5, 0.5, size=(6, 3))
    g_value = rng.standard_normal((6, 1))
    g_grad = rng.standard_normal((6, 3))
    _, _, cache = model.forward_with_input_grad(x, return_cache=True)
    with_cache = model.backward(x, g_value, g_grad, cache=cache)
    without = model.backward(x, g_value, g_grad)
    assert np.allclose(with_cache, without, atol=1e-12)


# -- flat parameter view ---------------------------------------------------------------


def test_flatten_round_trip(rng):
    model = tiny_model()
    p = model.get_params()
    assert p.size == model.n_params()
    other = tiny_model(seed=99)
    other.set_params(p)
    assert np.array_equal(other.get_params(), p)
    x = rng.uniform(-0.5, 0.5, size=(5, 3))
    assert np.array_equal(other.forward(x), model.forward(x))


def test_param_order_sums_to_total():
    model = tiny_model()
    assert sum(n for _, n in model.param_order()) == model.n_params()
    names = [name for name, _ in model.param_order()]
    assert names[0] == "encoder.weights" and names[1] == "encoder.angles"


def test_set_params_wrong_length():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.set_params(np.zeros(model.n_params() + 1))


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(rng):
    for kind in ("spe", "fpe", "identity"):
        model = tiny_model(encoder=kind)
        ckpt = Checkpoint.of(model, meta={"note": "test"})
        rebuilt = ckpt.build_model()
        x = rng.uniform(-0.5, 0.5, size=(8, 3))
        assert np.array_equal(rebuilt.forward(x), model.forward(x))


def test_model_from_config_unknown_encoder():
    with pytest.raises(ValueError):
        model_from_config({"encoder": {"type": "nope"}, "mlp_dims": [3, 1]})

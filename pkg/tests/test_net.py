import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gear.net import (
    ActivationKind,
    DenseLayer,
    Mlp,
    activation_eval,
    dumps,
    forward,
    init_conditioned,
    init_orthogonal,
    init_params,
    loads,
    logistic_terms,
    mlp_from_dict,
)
from gear.tensor_core import ShapeError, SpecError


@settings(max_examples=60, deadline=None)
@given(st.floats(-8, 8), st.sampled_from(list(ActivationKind)), st.integers(0, 2))
def test_derivatives_match_differences(u, act, order):
    # fourth-order central difference of the next-lower derivative
    h = 1e-3
    f = lambda v: activation_eval(act, np.array([v]), order)[0]  # noqa: E731
    num = (-f(u + 2 * h) + 8 * f(u + h) - 8 * f(u - h) + f(u - 2 * h)) / (12 * h)
    ana = activation_eval(act, np.array([u]), order + 1)[0]
    assert abs(ana - num) <= 1e-7 * max(1.0, abs(num))


def test_silu_values_and_logistic_terms():
    u = np.array([0.0, 0.35])
    sigma, E = logistic_terms(u)
    np.testing.assert_allclose(sigma, [0.5, 1 / (1 + np.exp(-0.35))])
    np.testing.assert_allclose(E, np.exp(-u))
    assert activation_eval("silu", np.array([0.0]), 1)[0] == 0.5
    assert activation_eval("silu", np.array([0.0]), 2)[0] == 0.5


def test_silu_far_tails_finite():
    u = np.array([-800.0, 800.0])
    for k in range(4):
        assert np.all(np.isfinite(activation_eval("silu", u, k)))


def test_quadratic_and_linear():
    u = np.array([1.5, -2.0])
    assert activation_eval("quadratic", u, 0).tolist() == [2.25, 4.0]
    assert activation_eval("quadratic", u, 2).tolist() == [2.0, 2.0]
    assert activation_eval("linear", u, 1).tolist() == [1.0, 1.0]
    with pytest.raises(SpecError):
        activation_eval("silu", u, 4)


def test_forward_vector_and_batch_agree(rng):
    mlp = init_params([3, 5, 2], "silu", rng)
    X = rng.normal(size=(4, 3))
    batch = forward(mlp, X)
    for i in range(4):
        np.testing.assert_allclose(forward(mlp, X[i]).output, batch.output[i], rtol=1e-14)
    assert len(batch.pre) == len(batch.post) == 2
    with pytest.raises(ShapeError):
        forward(mlp, np.ones(4))


def test_dropout_masks_apply_after_activation(rng):
    mlp = init_params([2, 3, 1], "silu", rng)
    x = rng.normal(size=(2, 2))
    mask = np.zeros((2, 3))
    out = forward(mlp, x, [mask, None])
    np.testing.assert_array_equal(out.post[0], 0.0)
    np.testing.assert_allclose(out.output, np.broadcast_to(mlp.layers[1].b, (2, 1)))


def test_init_params_glorot(rng):
    mlp = init_params([4, 6, 1], "silu", 7)
    assert [l.W.shape for l in mlp.layers] == [(6, 4), (1, 6)]
    assert np.abs(mlp.layers[0].W).max() <= np.sqrt(6 / 10)
    assert all(np.all(l.b == 0) for l in mlp.layers)
    assert mlp.layers[-1].act is ActivationKind.LINEAR
    assert dumps(init_params([4, 6, 1], "silu", 7)) == dumps(mlp)
    with pytest.raises(SpecError):
        init_params([3])
    with pytest.raises(SpecError):
        init_params([3, 0])


def test_layer_shape_validation():
    with pytest.raises(ShapeError):
        DenseLayer(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ShapeError):
        Mlp([DenseLayer(np.ones((2, 3)), np.ones(2)), DenseLayer(np.ones((2, 3)), np.ones(2))])


def test_json_round_trip_is_exact(rng):
    mlp = init_params([3, 4, 2], "silu", rng)
    mlp.layers[0].b[:] = rng.normal(size=4)
    back = loads(dumps(mlp))
    for a, b in zip(mlp.layers, back.layers):
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.b, b.b)
        assert a.act == b.act
    assert json.loads(dumps(mlp))["layers"][0]["act"] == "silu"


@pytest.mark.parametrize("doc", [{}, {"layers": [{"w": [[1]], "b": [0]}]}, {"layers": [{"w": [[1]], "b": [0], "act": "relu"}]}])
def test_bad_json_document(doc):
    with pytest.raises(SpecError):
        mlp_from_dict(doc)


def test_init_conditioned_singular_values(rng):
    mlp = init_conditioned(4, 3, rng)
    for l in mlp.layers:
        s = np.linalg.svd(l.W, compute_uv=False)
        assert 0.6 - 1e-12 <= s.min() and s.max() <= 1.4 + 1e-12


def test_init_orthogonal_partner_inverts_linear_stack(rng):
    fwd, inv = init_orthogonal(4, 3, rng, "linear", "linear")
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(forward(inv, forward(fwd, x).output).output, x, atol=1e-12)

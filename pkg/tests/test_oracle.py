import numpy as np
import pytest

from gear.geometry import InverseMode, curvature_at
from gear.net import init_conditioned
from gear.oracle import (
    ComparisonReport,
    EvaluationError,
    FdConfig,
    compare_reports,
    compare_tensors,
    fd_christoffel_map,
    fd_derivative,
    fd_geometry_pipeline,
    fd_metric_with_derivative,
)


def test_polynomial_derivatives():
    # f(x, y) = x^3 y: the Richardson stencils are exact for cubics
    f = lambda p: np.array([p[0] ** 3 * p[1]])  # noqa: E731
    x = np.array([1.5, -2.0])
    np.testing.assert_allclose(fd_derivative(f, x, 1)[0], [3 * 1.5**2 * -2.0, 1.5**3], rtol=1e-10)
    H = fd_derivative(f, x, 2)[0]
    np.testing.assert_allclose(H, [[6 * 1.5 * -2.0, 3 * 1.5**2], [3 * 1.5**2, 0.0]], rtol=1e-8, atol=1e-8)
    T = fd_derivative(f, x, 3)[0]
    assert T[0, 0, 0] == pytest.approx(-12.0, rel=1e-6)
    assert T[0, 0, 1] == pytest.approx(6 * 1.5, rel=1e-6) and T[1, 0, 0] == T[0, 0, 1]


def test_bad_order_and_nonfinite():
    with pytest.raises(ValueError):
        fd_derivative(lambda p: p, np.zeros(2), 4)
    with pytest.raises(EvaluationError):
        fd_derivative(lambda p: np.array([np.inf]), np.zeros(1), 1)


def test_config_validation():
    with pytest.raises(ValueError):
        FdConfig(steps=(1e-3, 0.0, 1e-2))
    with pytest.raises(ValueError):
        FdConfig(tolerances={"J": 0.0})
    assert FdConfig().step(3, np.array([4.0])) == pytest.approx(4e-2)


def test_compare_tensors_reports_offender():
    a = np.zeros((2, 3))
    b = a.copy()
    b[1, 2] = 1e-3
    c = compare_tensors("x", a, b, 1e-4)
    assert c.offending_index == (1, 2) and not c.passed
    assert c.max_rel_err == pytest.approx(1.0)
    assert compare_tensors("x", a, b, 1e-2, scale=1.0).passed
    with pytest.raises(ValueError):
        compare_tensors("x", a, np.zeros(3), 1.0)


@pytest.mark.parametrize("mode", [InverseMode.EXACT, InverseMode.LEARNED])
def test_pipeline_agrees_with_analytic(rng, mode):
    T, I = init_conditioned(3, 2, rng), init_conditioned(3, 2, rng)
    z = 0.4 * rng.normal(size=3)
    rep = compare_reports(curvature_at(T, I, z, mode), fd_geometry_pipeline(T, I, z, mode))
    assert isinstance(rep, ComparisonReport)
    assert rep.passed, rep.failures()
    assert rep["gamma"].max_rel_err < 1e-6


def test_christoffel_derivative_by_differencing_gamma(rng):
    # independent route to dGamma: difference the numeric Christoffel map itself
    T = init_conditioned(2, 2, rng)
    z = 0.3 * rng.normal(size=2)
    cfg = FdConfig()
    num = np.moveaxis(fd_derivative(fd_christoffel_map(T, cfg), z, 1, FdConfig(steps=(1e-2, 1e-2, 1e-2))), -1, 0)
    ana = curvature_at(T, None, z).dgamma
    assert np.abs(ana - num).max() <= 1e-3 * max(1.0, np.abs(ana).max())


def test_metric_with_derivative_shapes(rng):
    g, dg = fd_metric_with_derivative(init_conditioned(3, 1, rng), np.zeros(3))
    assert g.shape == (3, 3) and dg.shape == (3, 3, 3)
    np.testing.assert_allclose(dg, dg.transpose(0, 2, 1), atol=1e-9)


def test_learned_mode_requires_inverse(rng):
    with pytest.raises(ValueError):
        fd_geometry_pipeline(init_conditioned(2, 1, rng), None, np.zeros(2), InverseMode.LEARNED)

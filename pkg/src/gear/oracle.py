"""Finite-difference twin of the analytic geometry pipeline.

Everything here is rebuilt from central differences of the forward map of a
module. Nothing from :mod:`gear.geometry` or :mod:`gear.tensor_core` is used,
so a transcription error in the closed-form blocks shows up as a disagreement.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import CurvatureBundle, InverseMode, MetricBundle
from .net import Mlp, forward


class EvaluationError(FloatingPointError):
    """The differenced function returned a non-finite value."""


DEFAULT_TOLERANCES = {
    "J": 1e-6,
    "H": 1e-4,
    "T3": 1e-4,
    "g": 1e-6,
    "g_inv": 1e-6,
    "dg": 1e-4,
    "ddg": 1e-3,
    "gamma": 1e-4,
    "dgamma": 1e-3,
    "riemann": 1e-3,
    "ricci": 1e-3,
    "scalar": 1e-3,
}


@dataclass
class FdConfig:
    """Central-difference steps per derivative order and comparison tolerances.

    The third-order step is scaled by ``max(1, |x|_inf)``.
    """

    steps: tuple[float, float, float] = (1e-3, 1e-3, 1e-2)
    tolerances: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    richardson: bool = True

    def __post_init__(self):
        if len(self.steps) != 3 or any(h <= 0 for h in self.steps):
            raise ValueError(f"steps must be three positive numbers, got {self.steps}")
        if any(t <= 0 for t in self.tolerances.values()):
            raise ValueError("tolerances must be positive")

    def step(self, order: int, x) -> float:
        h = self.steps[order - 1]
        if order == 3:
            h *= max(1.0, float(np.max(np.abs(x))))
        return h


def _checked(f, x):
    y = np.asarray(f(x), dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise EvaluationError(f"non-finite function value at x={x}")
    return y


def _central(f: Callable, x: np.ndarray, order: int, h: float) -> np.ndarray:
    n = x.size
    eye = np.eye(n)
    y0 = _checked(f, x)
    out = np.zeros(y0.shape + (n,) * order)
    if order == 1:
        for j in range(n):
            out[..., j] = (_checked(f, x + h * eye[j]) - _checked(f, x - h * eye[j])) / (2 * h)
        return out
    signs = list(itertools.product((1.0, -1.0), repeat=order))
    denom = (2 * h) ** order
    for idx in itertools.combinations_with_replacement(range(n), order):
        acc = np.zeros_like(y0)
        for s in signs:
            step = sum(si * eye[k] for si, k in zip(s, idx))
            acc += np.prod(s) * _checked(f, x + h * step)
        val = acc / denom
        for perm in set(itertools.permutations(idx)):
            out[(...,) + perm] = val
    return out


def fd_derivative(f: Callable, x, order: int, cfg: FdConfig | None = None) -> np.ndarray:
    """Central-difference derivative tensor of ``f`` at ``x``.

    The result has shape ``f(x).shape + (n,) * order`` with the differentiation
    indices last. With ``cfg.richardson`` the step-``h`` and step-``h/2`` stencils
    are combined to cancel the leading ``h^2`` truncation term.
    """
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2 or 3, got {order}")
    cfg = cfg or FdConfig()
    x = np.asarray(x, dtype=np.float64)
    h = cfg.step(order, x)
    coarse = _central(f, x, order, h)
    if not cfg.richardson:
        return coarse
    fine = _central(f, x, order, h / 2)
    return (4.0 * fine - coarse) / 3.0


# -- numeric geometry ------------------------------------------------------------


def fd_jacobian(mlp: Mlp, z, cfg: FdConfig | None = None) -> np.ndarray:
    return fd_derivative(lambda p: forward(mlp, p).output, z, 1, cfg)


def fd_metric_map(mlp: Mlp, cfg: FdConfig | None = None) -> Callable:
    def metric(z):
        J = fd_jacobian(mlp, z, cfg)
        return J.T @ J

    return metric


def _christoffel(g_inv, dg):
    # dg[k, i, j] = d_k g_ij
    S = np.einsum("jmk->mjk", dg) + np.einsum("kmj->mjk", dg) - np.einsum("mkj->mjk", dg)
    return 0.5 * np.einsum("im,mjk->ijk", g_inv, S), S


def _algebra(g, g_inv, dg, ddg):
    gamma, S = _christoffel(g_inv, dg)
    dg_inv = -np.einsum("ia,jab,bm->jim", g_inv, dg, g_inv)
    D = (
        np.einsum("jkml->jmkl", ddg)
        + np.einsum("jlmk->jmkl", ddg)
        - np.einsum("jmlk->jmkl", ddg)
    )
    dgamma = 0.5 * (np.einsum("jim,mkl->jikl", dg_inv, S) + np.einsum("im,jmkl->jikl", g_inv, D))
    R = (
        np.einsum("mlnr->lrmn", dgamma)
        - np.einsum("nlmr->lrmn", dgamma)
        + np.einsum("lms,snr->lrmn", gamma, gamma)
        - np.einsum("lns,smr->lrmn", gamma, gamma)
    )
    lowered = np.einsum("la,armn->lrmn", g, R)
    ric = np.einsum("lm,lrmn->rn", g_inv, lowered)
    scalar = float(np.einsum("rn,rn->", g_inv, ric))
    return gamma, dgamma, R, ric, scalar


def fd_geometry_pipeline(
    transfer: Mlp,
    inverse: Mlp | None,
    z,
    mode: InverseMode | str = InverseMode.EXACT,
    cfg: FdConfig | None = None,
) -> CurvatureBundle:
    """Numeric counterpart of :func:`gear.geometry.curvature_at`.

    g comes from the differenced Jacobian; dg and ddg difference that metric
    map; Christoffel, Riemann and Ricci follow by direct index algebra. In the
    learned mode g^ij is built from the differenced Jacobian of ``inverse`` and
    d g^ij uses the same -g^-1 dg g^-1 identity as the analytic path.
    """
    cfg = cfg or FdConfig()
    mode = InverseMode(mode)
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    if any(l.W.shape != (n, n) for l in transfer.layers):
        raise ValueError("transfer module must have constant width")
    metric = fd_metric_map(transfer, cfg)
    g = metric(z)
    dg = np.moveaxis(fd_derivative(metric, z, 1, _outer(cfg, 2)), -1, 0)
    ddg = np.einsum("mljk->jkml", fd_derivative(metric, z, 2, _outer(cfg, 3)))
    if mode is InverseMode.EXACT:
        g_inv = np.linalg.inv(g)
    else:
        if inverse is None:
            raise ValueError("learned mode needs the inverse module")
        Ji = fd_jacobian(inverse, forward(transfer, z).output, cfg)
        g_inv = Ji @ Ji.T
    gamma, dgamma, R, ric, scalar = _algebra(g, g_inv, dg, ddg)
    return CurvatureBundle(MetricBundle(g, g_inv, dg, ddg, mode), gamma, dgamma, R, ric, scalar)


def _outer(cfg: FdConfig, order: int) -> FdConfig:
    """Config whose order-1/2 step is the outer step used for nested differencing.

    The metric map already carries an inner difference, so its first derivative
    uses the order-2 step and its second derivative the order-3 step.
    """
    h = cfg.steps[order - 1]
    return FdConfig((h, h, cfg.steps[2]), cfg.tolerances, cfg.richardson)


def fd_christoffel_map(transfer: Mlp, cfg: FdConfig | None = None) -> Callable:
    """z -> Gamma(z) with exact inverse, all from differences of the forward map."""
    cfg = cfg or FdConfig()
    metric = fd_metric_map(transfer, cfg)

    def gamma(z):
        g = metric(z)
        dg = np.moveaxis(fd_derivative(metric, z, 1, _outer(cfg, 2)), -1, 0)
        return _christoffel(np.linalg.inv(g), dg)[0]

    return gamma


# -- comparison ------------------------------------------------------------------


@dataclass
class TensorComparison:
    name: str
    max_rel_err: float
    max_abs_err: float
    tolerance: float
    offending_index: tuple[int, ...]
    passed: bool


@dataclass
class ComparisonReport:
    entries: list[TensorComparison]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def __getitem__(self, name: str) -> TensorComparison:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def failures(self) -> list[TensorComparison]:
        return [e for e in self.entries if not e.passed]


def compare_tensors(name: str, analytic, numeric, tolerance: float, scale: float | None = None):
    """Scale-normalized error: max|a - n| / max(|n|_max, scale, tiny)."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape) if diff.size else ()
    max_abs = float(diff.max()) if diff.size else 0.0
    denom = max(float(np.abs(b).max()) if b.size else 0.0, scale or 0.0, 1e-300)
    rel = max_abs / denom
    return TensorComparison(name, rel, max_abs, tolerance, tuple(int(i) for i in idx), rel <= tolerance)


def compare_reports(analytic: CurvatureBundle, numeric: CurvatureBundle, cfg: FdConfig | None = None):
    """Per-tensor comparison of two curvature bundles.

    Riemann is normalized by the magnitude of the terms it is built from,
    max(1, |Gamma|^2, |dGamma|), since it may cancel to near zero; Ricci and the
    scalar additionally carry the magnitudes of the g and g^-1 factors that
    contract it.
    """
    cfg = cfg or FdConfig()
    tol = cfg.tolerances
    if analytic.metric.g.shape != numeric.metric.g.shape:
        raise ValueError("bundles have different dimensions")
    curv_scale = max(
        1.0,
        float(np.abs(numeric.gamma).max()) ** 2,
        float(np.abs(numeric.dgamma).max()),
    )
    # each contraction with g or g^-1 rescales the noise floor accordingly
    g_mag = float(np.abs(numeric.metric.g).max())
    ginv_mag = float(np.abs(numeric.metric.g_inv).max())
    ricci_scale = curv_scale * g_mag * ginv_mag
    scalar_scale = ricci_scale * ginv_mag
    pairs = [
        ("g", analytic.metric.g, numeric.metric.g, None),
        ("g_inv", analytic.metric.g_inv, numeric.metric.g_inv, None),
        ("dg", analytic.metric.dg, numeric.metric.dg, None),
        ("ddg", analytic.metric.ddg, numeric.metric.ddg, None),
        ("gamma", analytic.gamma, numeric.gamma, None),
        ("dgamma", analytic.dgamma, numeric.dgamma, None),
        ("riemann", analytic.riemann, numeric.riemann, curv_scale),
        ("ricci", analytic.ricci, numeric.ricci, ricci_scale),
        ("scalar", np.atleast_1d(analytic.scalar), np.atleast_1d(numeric.scalar), scalar_scale),
    ]
    return ComparisonReport([compare_tensors(n, a, b, tol[n], s) for n, a, b, s in pairs])


def fd_metric_with_derivative(mlp: Mlp, z, cfg: FdConfig | None = None):
    """(g, dg) at ``z`` by differencing, dg laid out as ``[k, i, j]``."""
    cfg = cfg or FdConfig()
    z = np.asarray(z, dtype=np.float64)
    metric = fd_metric_map(mlp, cfg)
    return metric(z), np.moveaxis(fd_derivative(metric, z, 1, _outer(cfg, 2)), -1, 0)

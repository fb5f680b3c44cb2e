"""Closed-form Riemannian geometry of the metric pulled back through an MLP.

Index layout used throughout (``n`` = latent width):

* ``J[i, j]``          = d x'^i / d x^j
* ``H[i, j, k]``       = d^2 x'^i / d x^j d x^k
* ``T3[i, j, k, l]``   = d^3 x'^i / d x^j d x^k d x^l
* ``dg[k, i, j]``      = d_k g_ij
* ``ddg[j, k, m, l]``  = d_j d_k g_ml
* ``gamma[i, j, k]``   = Gamma^i_jk
* ``dgamma[j, i, k, l]`` = d_j Gamma^i_kl
* ``riemann[a, b, c, d]`` = R^a_bcd

All functions work on numpy arrays and on traced JAX arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .net import DenseLayer, ForwardTrace, Mlp, activation_eval, forward
from .tensor_core import ShapeError, contract, invert_matrix, namespace

CURVATURE_CLIP = 1e4

# number of curvature_at calls (under jit: traces); lets tests confirm that an
# ablated run never touches curvature tensors
_evaluations = {"curvature_at": 0}


def evaluation_count() -> int:
    return _evaluations["curvature_at"]


def reset_evaluation_count() -> None:
    _evaluations["curvature_at"] = 0


class InverseMode(str, enum.Enum):
    EXACT = "exact"
    LEARNED = "learned"


@dataclass
class DerivativeStack:
    J: np.ndarray
    H: np.ndarray | None = None
    T3: np.ndarray | None = None


@dataclass
class MetricBundle:
    g: np.ndarray
    g_inv: np.ndarray
    dg: np.ndarray
    ddg: np.ndarray
    inverse_mode: InverseMode


@dataclass
class CurvatureBundle:
    metric: MetricBundle
    gamma: np.ndarray
    dgamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: float


# -- per-layer derivative blocks ---------------------------------------------


def layer_jacobian(layer: DenseLayer, u, x_prev=None):
    """d x^(n+1)i / d x^(n)j = f'(u_i) W_ij.

    For SiLU, ``f'(u) = sigma + u E sigma^2`` with ``sigma`` and ``E`` taken from
    this layer's own pre-activation ``u``.
    """
    return contract("i,ij->ij", activation_eval(layer.act, u, 1), layer.W)


def layer_second_derivative(layer: DenseLayer, u, x_prev=None):
    """f''(u_i) W_ij W_ik, shape (out, in, in)."""
    f2W = contract("i,ij->ij", activation_eval(layer.act, u, 2), layer.W)
    return contract("ij,ik->ijk", f2W, layer.W)


def layer_third_derivative(layer: DenseLayer, u, x_prev=None):
    """f'''(u_i) W_ij W_ik W_il, shape (out, in, in, in)."""
    f3W = contract("i,ij->ij", activation_eval(layer.act, u, 3), layer.W)
    WW = contract("ik,il->ikl", layer.W, layer.W)
    return contract("ij,ikl->ijkl", f3W, WW)


def compose_derivatives(mlp: Mlp, trace: ForwardTrace, order: int = 3) -> DerivativeStack:
    """Chain the per-layer blocks into J, H and T3 of the whole module.

    With a composite ``G`` (J, H, T) followed by a layer ``F`` (Jl, Hl, Tl)::

        J' = Jl J
        H' = Jl H + Hl(J, J)
        T' = Jl T + Hl(H, J) [three placements] + Tl(J, J, J)
    """
    n = mlp.n_in
    for layer in mlp.layers:
        if layer.W.shape != (n, n):
            raise ShapeError(f"curvature needs constant width {n}, got layer {layer.W.shape}")
    xp = namespace(trace.x, *trace.pre)
    J = xp.eye(n)
    H = xp.zeros((n, n, n)) if order >= 2 else None
    T = xp.zeros((n, n, n, n)) if order >= 3 else None
    for layer, u in zip(mlp.layers, trace.pre):
        Jl = layer_jacobian(layer, u)
        newJ = contract("ia,aj->ij", Jl, J)
        if order >= 2:
            Hl = layer_second_derivative(layer, u)
            HlJ = contract("iab,bk->iak", Hl, J)  # Hl(., J)
            newH = contract("ia,ajk->ijk", Jl, H) + contract("iak,aj->ijk", HlJ, J)
        if order >= 3:
            Tl = layer_third_derivative(layer, u)
            TlJ = contract("iabc,cl->iabl", Tl, J)
            TlJJ = contract("iabl,bk->iakl", TlJ, J)
            TlJJJ = contract("iakl,aj->ijkl", TlJJ, J)
            HlH = contract("iab,ajk->ibjk", Hl, H)
            T = contract("ia,ajkl->ijkl", Jl, T) + _three_placements(HlH, J) + TlJJJ
        J = newJ
        if order >= 2:
            H = newH
    return DerivativeStack(J, H, T)


def _three_placements(HlH, J):
    # HlH[i, b, p, q] = Hl_ab H^a_pq ; sum over b against J for the lone index
    a = contract("ibjk,bl->ijkl", HlH, J)  # H_jk J_l
    b = contract("ibjl,bk->ijkl", HlH, J)  # H_jl J_k
    c = contract("ibkl,bj->ijkl", HlH, J)  # H_kl J_j
    return a + b + c


def module_derivatives(mlp: Mlp, z, order: int = 3) -> tuple[ForwardTrace, DerivativeStack]:
    trace = forward(mlp, z)
    return trace, compose_derivatives(mlp, trace, order)


# -- metric and its derivatives ------------------------------------------------


def pullback_metric(J):
    """g_ij = J^m_i J^n_j eta_mn with eta the identity."""
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ShapeError(f"pullback needs a square Jacobian, got {J.shape}")
    return contract("mi,mj->ij", J, J)


def metric_derivative(stack: DerivativeStack):
    """d_k g_ij = H^m_ki J^m_j + H^m_kj J^m_i, symmetric in (i, j) by construction."""
    A = contract("mki,mj->kij", stack.H, stack.J)
    return A + A.transpose(0, 2, 1)


def metric_second_derivative(stack: DerivativeStack):
    """d_j d_k g_ml from J, H and T3.

    d_j d_k g_ml = T^o_jkm J^o_l + H^o_km H^o_jl + (m <-> l)
    """
    B = contract("ojkm,ol->jkml", stack.T3, stack.J) + contract("okm,ojl->jkml", stack.H, stack.H)
    return B + B.transpose(0, 1, 3, 2)


def inverse_metric(
    g,
    mode: InverseMode | str = InverseMode.EXACT,
    inverse_module: Mlp | None = None,
    z_flat=None,
    ridge: float = 0.0,
):
    """Contravariant metric g^ij.

    ``EXACT`` inverts ``g`` (plus ``ridge``). ``LEARNED`` builds
    ``g^ij = J'^i_m J'^j_m`` from the Jacobian of the inverse-transfer module at
    the flat-frame point ``z_flat``; it only approximates the true inverse.
    """
    mode = InverseMode(mode)
    if mode is InverseMode.EXACT:
        return invert_matrix(g, ridge)
    if inverse_module is None or z_flat is None:
        raise ValueError("learned inverse needs the inverse module and the flat-frame point")
    _, stack = module_derivatives(inverse_module, z_flat, order=1)
    return contract("im,jm->ij", stack.J, stack.J)


def inverse_metric_derivative(g_inv, dg):
    """d_j g^im = -g^ia (d_j g_ab) g^bm, laid out as ``[j, i, m]``."""
    left = contract("ia,jab->jib", g_inv, dg)
    return -contract("jib,bm->jim", left, g_inv)


# -- connection and curvature --------------------------------------------------


def _bracket(dg):
    # S[m, j, k] = d_j g_mk + d_k g_mj - d_m g_kj
    return dg.transpose(1, 0, 2) + dg.transpose(1, 2, 0) - dg


def christoffel(g_inv, dg):
    """Gamma^i_jk = 1/2 g^im (d_j g_mk + d_k g_mj - d_m g_kj)."""
    gamma = 0.5 * contract("im,mjk->ijk", g_inv, _bracket(dg))
    # the bracket is already symmetric in (j, k); averaging removes summation-order noise
    return 0.5 * (gamma + gamma.transpose(0, 2, 1))


def christoffel_derivative(g_inv, dg, ddg, dg_inv):
    """d_j Gamma^i_kl, laid out as ``[j, i, k, l]``.

    d_j Gamma^i_kl = 1/2 (d_j g^im S_mkl
                          + g^im (d_j d_k g_ml + d_j d_l g_mk - d_j d_m g_lk))
    """
    first = contract("jim,mkl->jikl", dg_inv, _bracket(dg))
    # D[j, m, k, l] = ddg[j,k,m,l] + ddg[j,l,m,k] - ddg[j,m,l,k]
    D = ddg.transpose(0, 2, 1, 3) + ddg.transpose(0, 2, 3, 1) - ddg.transpose(0, 1, 3, 2)
    second = contract("im,jmkl->jikl", g_inv, D)
    out = 0.5 * (first + second)
    return 0.5 * (out + out.transpose(0, 1, 3, 2))


def riemann(gamma, dgamma):
    """R^l_rmn = d_m Gamma^l_nr - d_n Gamma^l_mr + Gamma^l_ms Gamma^s_nr - Gamma^l_ns Gamma^s_mr.

    Built as ``P - P.swap(m, n)`` so antisymmetry in the last pair is exact.
    """
    P = dgamma.transpose(1, 3, 0, 2) + contract("lms,snr->lrmn", gamma, gamma)
    return P - P.transpose(0, 1, 3, 2)


def lower_first_index(g, riemann_tensor):
    """R_lrmn = g_la R^a_rmn."""
    return contract("la,armn->lrmn", g, riemann_tensor)


def ricci(g, g_inv, riemann_tensor):
    """Ricci tensor R_rn = g^lm R_lrmn and scalar R = g^rn R_rn."""
    lowered = lower_first_index(g, riemann_tensor)
    ric = contract("lm,lrmn->rn", g_inv, lowered)
    scalar = contract("rn,rn->", g_inv, ric)
    return ric, scalar


def curvature_at(
    transfer: Mlp,
    inverse: Mlp | None,
    z,
    mode: InverseMode | str = InverseMode.EXACT,
    ridge: float = 0.0,
) -> CurvatureBundle:
    """Full pipeline at one latent point ``z`` in the curved (task) frame.

    forward -> J/H/T3 -> g, dg, ddg -> g^-1 (exact or learned) -> Gamma, dGamma
    -> Riemann -> Ricci tensor and scalar.
    """
    mode = InverseMode(mode)
    _evaluations["curvature_at"] += 1
    trace, stack = module_derivatives(transfer, z, order=3)
    g = pullback_metric(stack.J)
    dg = metric_derivative(stack)
    ddg = metric_second_derivative(stack)
    g_inv = inverse_metric(g, mode, inverse, trace.output, ridge)
    dg_inv = inverse_metric_derivative(g_inv, dg)
    gamma = christoffel(g_inv, dg)
    dgamma = christoffel_derivative(g_inv, dg, ddg, dg_inv)
    R = riemann(gamma, dgamma)
    ric, scalar = ricci(g, g_inv, R)
    return CurvatureBundle(MetricBundle(g, g_inv, dg, ddg, mode), gamma, dgamma, R, ric, scalar)


def ricci_scalar(transfer: Mlp, inverse: Mlp | None, z, mode=InverseMode.LEARNED, ridge: float = 0.0):
    return curvature_at(transfer, inverse, z, mode, ridge).scalar


def flatness_ratio(bundle: CurvatureBundle) -> float:
    """max|R^a_bcd| / max(1, max|Gamma|^2, max|dGamma|); zero for a flat metric."""
    scale = max(1.0, float(np.max(np.abs(bundle.gamma))) ** 2, float(np.max(np.abs(bundle.dgamma))))
    return float(np.max(np.abs(bundle.riemann))) / scale


def jacobian_batch(mlp: Mlp, X):
    """Jacobians of ``mlp`` at each row of ``X``; shape (batch, out, in).

    Only first derivatives are needed, so widths may change between layers.
    """
    trace = forward(mlp, X)
    J = None
    for layer, u in zip(mlp.layers, trace.pre):
        Jl = contract("bi,ij->bij", activation_eval(layer.act, u, 1), layer.W)
        J = Jl if J is None else contract("bia,baj->bij", Jl, J)
    return J

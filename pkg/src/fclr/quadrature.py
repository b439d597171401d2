"""Functional inner-product matrices via trapezoidal quadrature.

All integrals in the fitting criterion are taken over the observation grid
with composite trapezoid weights, which supports uneven grids (missing
years are simply absent points). The control coefficients are unpenalized
and unconstrained, so they are profiled out of the quadratic once here.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .basis import basis_matrix

RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class GramSystem:
    """Quadrature-built quadratic form of the fitting criterion.

    K (pk x pk), J (pk), M ((p_c+1)k x (p_c+1)k), P ((p_c+1)k) and
    Q ((p_c+1)k x pk) assemble the joint quadratic in (b, b_c);
    K_tilde = K - Q^T M^-1 Q and J_tilde = J - Q^T M^-1 P are the
    control-profiled versions the solver works on.
    """

    K: np.ndarray
    J: np.ndarray
    M: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    K_tilde: np.ndarray
    J_tilde: np.ndarray
    p: int
    k: int
    n: int
    m_factor: tuple = field(repr=False, default=None)


def trapezoid_weights(grid):
    """Composite trapezoid weights for a strictly increasing grid.

    w_1 = (t_2-t_1)/2, w_V = (t_V-t_{V-1})/2, interior w_v =
    (t_{v+1}-t_{v-1})/2; the weights sum to the grid span.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("insufficient grid: need at least 2 points")
    d = np.diff(grid)
    if np.any(d <= 0):
        raise ValueError("invalid grid: must be strictly increasing")
    w = np.empty(grid.size)
    w[0] = d[0] / 2
    w[-1] = d[-1] / 2
    w[1:-1] = (d[1:] + d[:-1]) / 2
    return w


def build_gram(Z, Z_c, y, spec, grid):
    """Assemble the Gram system from the design arrays.

    Parameters
    ----------
    Z : ndarray, n x p x V
        Log-transformed compositional design.
    Z_c : ndarray, n x (p_c+1) x V
        Control design including the intercept column.
    y : ndarray, n x V
        Response curves.
    spec : BasisSpec
        Basis shared by all coefficient curves.
    grid : ndarray, V
        Observation times, inside the basis domain.

    Exploits the concurrent structure: each time slice contributes
    (Z_v^T Z_v) kron (phi_v phi_v^T), so the pk x pk accumulation never
    forms the n x pk row expansion.
    """
    Z = np.asarray(Z, dtype=float)
    Z_c = np.asarray(Z_c, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = np.asarray(grid, dtype=float)
    n, p, v = Z.shape
    if Z_c.shape[0] != n or Z_c.shape[2] != v or y.shape != (n, v) or grid.size != v:
        raise ValueError("inconsistent design shapes")
    pc1 = Z_c.shape[1]
    k = spec.count

    w = trapezoid_weights(grid)
    phi = basis_matrix(spec, grid)                      # V x k
    T = np.einsum("va,vb->vab", phi, phi)               # V x k x k

    S = np.einsum("nav,nbv->vab", Z, Z)                 # V x p x p
    Sc = np.einsum("nav,nbv->vab", Z_c, Z_c)            # V x pc1 x pc1
    Scx = np.einsum("nav,nbv->vab", Z_c, Z)             # V x pc1 x p
    Zy = np.einsum("nav,nv->va", Z, y)                  # V x p
    Zcy = np.einsum("nav,nv->va", Z_c, y)               # V x pc1

    K = np.einsum("v,vab,vcd->acbd", w, S, T, optimize=True).reshape(p * k, p * k)
    M = np.einsum("v,vab,vcd->acbd", w, Sc, T, optimize=True).reshape(pc1 * k, pc1 * k)
    Q = np.einsum("v,vab,vcd->acbd", w, Scx, T, optimize=True).reshape(pc1 * k, p * k)
    J = np.einsum("v,va,vb->ab", w, Zy, phi, optimize=True).reshape(p * k)
    P = np.einsum("v,va,vb->ab", w, Zcy, phi, optimize=True).reshape(pc1 * k)

    K = (K + K.T) / 2
    M = (M + M.T) / 2

    # small ridge guards collinear user controls; intercept-only M is benign
    delta = RIDGE_SCALE * np.trace(M) / M.shape[0]
    M_stab = M + delta * np.eye(M.shape[0])
    try:
        m_factor = cho_factor(M_stab, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular controls: M is not positive definite") from exc

    MinvQ = cho_solve(m_factor, Q, check_finite=False)
    MinvP = cho_solve(m_factor, P, check_finite=False)
    K_tilde = K - Q.T @ MinvQ
    K_tilde = (K_tilde + K_tilde.T) / 2
    J_tilde = J - Q.T @ MinvP

    return GramSystem(
        K=K, J=J, M=M, P=P, Q=Q,
        K_tilde=K_tilde, J_tilde=J_tilde,
        p=p, k=k, n=n, m_factor=m_factor,
    )


def recover_control(sys, b_hat):
    """Control coefficients minimizing the joint quadratic at fixed b_hat.

    Solves M b_c = P - Q b_hat with the cached factorization.
    """
    rhs = sys.P - sys.Q @ np.asarray(b_hat, dtype=float)
    return cho_solve(sys.m_factor, rhs, check_finite=False)

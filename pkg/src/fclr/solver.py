"""Constrained group-lasso solver: augmented Lagrangian outer loop, ADMM inner.

The profiled criterion  0.5 b'K~b - b'J~ + lambda * sum_j ||b_j||_2  subject
to  L~b = 0  is solved by an augmented Lagrangian scheme whose inner
subproblem (a standard group lasso on the rho-augmented quadratic) is
handled by ADMM with a cached factorization. Paths over decreasing lambda
warm-start each fit from the previous solution.

The unconstrained baseline ("BGL": one randomly chosen reference part
dropped per composition, additive-log-ratio design) reuses the same
machinery with an empty constraint set and maps its coefficients back to
the full part set for comparability.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._admm import admm_segment
from .design import ConstraintSet
from .quadrature import recover_control

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class SolverConfig:
    """Penalty weight and iteration controls for one fit.

    ``admm_step`` pins the ADMM penalty tau; the default None selects a
    spectral step ladder per system (see _StepLadder), which keeps the
    splitting well conditioned across problem scales and sparsity regimes.
    ``admm_relax`` is the over-relaxation factor.
    """

    lam: float = 0.0
    rho0: float = 1.0
    epsilon: float = 1e-6
    k_max: int = 50
    admm_tol_abs: float = 1e-8
    admm_tol_rel: float = 1e-6
    admm_iter_max: int = 10_000
    admm_step: float | None = None
    admm_relax: float = 1.7
    rho_max: float = 1e12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.rho0 <= 0 or self.epsilon <= 0:
            raise ValueError("rho0 and epsilon must be > 0")
        if self.admm_tol_abs <= 0 or self.admm_tol_rel <= 0:
            raise ValueError("ADMM tolerances must be > 0")
        if self.k_max < 1 or self.admm_iter_max < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.admm_step is not None and self.admm_step <= 0:
            raise ValueError("admm_step must be > 0")
        if not 0 < self.admm_relax < 2:
            raise ValueError("admm_relax must be in (0, 2)")
        if self.rho_max < self.rho0:
            raise ValueError("rho_max must be >= rho0")


@dataclass(frozen=True)
class FitResult:
    """Solution of one penalized fit.

    ``b_hat`` stacks the p coefficient groups (k entries each);
    ``b_c_hat`` the control coefficients; ``u_hat`` is the dual certificate
    for the zero-sum constraints. ``references`` records the dropped
    reference part per block for baseline fits (None for constrained fits).
    """

    b_hat: np.ndarray
    b_c_hat: np.ndarray
    u_hat: np.ndarray
    outer_iters: int
    inner_iters_total: int
    constraint_residual: float
    objective: float
    converged: bool
    references: tuple | None = None


def group_soft_threshold(v, kappa):
    """Proximal map of the group penalty: shrink v toward 0 by kappa in norm."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm <= kappa:
        return np.zeros_like(v)
    return (1.0 - kappa / nrm) * v


def _group_norms(b, n_groups):
    return np.sqrt(np.einsum("ij,ij->i", b.reshape(n_groups, -1), b.reshape(n_groups, -1)))


def _stationarity(g, b, lam, n_groups):
    """Max group-KKT violation of 0.5 b'Ab - c'b + lam sum||b_j|| at b, g = Ab - c."""
    k = b.size // n_groups
    G = g.reshape(n_groups, k)
    B = b.reshape(n_groups, k)
    bnorms = np.sqrt(np.einsum("ij,ij->i", B, B))
    gnorms = np.sqrt(np.einsum("ij,ij->i", G, G))
    active = bnorms > 0
    res = np.maximum(gnorms - lam, 0.0)
    if active.any():
        R = G[active] + lam * B[active] / bnorms[active, None]
        res[active] = np.sqrt(np.einsum("ij,ij->i", R, R))
    return float(res.max()) if res.size else 0.0


def _sparse_quad_grad(A, b, c, n_groups):
    """g = A b - c, skipping zero groups when b is sparse (A symmetric)."""
    k = b.size // n_groups
    active = np.flatnonzero(np.abs(b.reshape(n_groups, k)).max(axis=1) > 0)
    if active.size == 0:
        return -c
    if active.size > 0.4 * n_groups:
        return A @ b - c
    cols = (active[:, None] * k + np.arange(k)[None, :]).ravel()
    return b[cols] @ A[cols] - c


def _factorize(K_aug, tau):
    """Cached inverse of (K_aug + tau I); tau > 0 makes it PD."""
    pk = K_aug.shape[0]
    f = cho_factor(K_aug + tau * np.eye(pk), lower=True, check_finite=False)
    return np.ascontiguousarray(cho_solve(f, np.eye(pk), check_finite=False))


_ADAPT_EVERY = 100
_ADAPT_RATIO = 10.0
_ADAPT_MAX_JUMPS = 6
_M_RANGE = 40
_WORKSET_FRACTION = 0.75
_WORKSET_ROUNDS = 40


class _StepLadder:
    """Cached factorizations of (K_aug + tau I) on the ladder tau0 * 2^m.

    The base step and the sparse-regime offset come from the spectrum of
    K_aug: ill-conditioned dense solves contract fastest near the geometric
    mean of the extreme eigenvalues, while sparse solves (the usual case on
    a penalty path) prefer a step near the top of the spectrum. A fixed
    ``admm_step`` pins the ladder base and disables the regime offset.
    ``spectrum`` supplies precomputed eigenvalue bounds to skip the
    decomposition (used for reduced systems, whose spectra interlace the
    full one).
    """

    def __init__(self, K_aug, config, spectrum=None):
        self.K_aug = K_aug
        self._cache = {}
        if spectrum is None:
            ev = np.linalg.eigvalsh(K_aug)
            mu_min, mu_max = float(ev[0]), float(ev[-1])
        else:
            mu_min, mu_max = spectrum
        self.mu_max = mu_max
        self.spectrum = (mu_min, mu_max)
        if config.admm_step is not None:
            self.base = float(config.admm_step)
            self.sparse_m = 0
            return
        if mu_max <= 0:
            self.base = 1.0
            self.sparse_m = 0
            return
        mu_min = max(mu_min, 1e-6 * mu_max)
        self.base = max(np.sqrt(mu_min * mu_max) / 4.0, _TINY)
        self.sparse_m = int(np.clip(round(np.log2(mu_max / 8.0 / self.base)),
                                    -_M_RANGE, _M_RANGE))

    def __call__(self, m):
        if m not in self._cache:
            tau = self.base * 2.0 ** m
            self._cache[m] = (_factorize(self.K_aug, tau), tau)
        return self._cache[m]

    def reduced(self, work, k, config):
        """Ladder for the principal submatrix on the working groups.

        Cached by group set; a cached strict superset within 25% extra
        groups is reused instead of refactorizing (the extra groups simply
        shrink to zero in the reduced solve).
        """
        if not hasattr(self, "_reduced"):
            self._reduced = {}
        key = work.tobytes()
        hit = self._reduced.get(key)
        if hit is not None:
            return hit
        n_work = int(work.sum())
        best = None
        for cand_key, cand in self._reduced.items():
            cand_work = np.frombuffer(cand_key, dtype=work.dtype)
            if cand[0].sum() <= 1.25 * n_work and np.all(work <= cand_work):
                if best is None or cand[0].sum() < best[0].sum():
                    best = cand
        if best is not None:
            return best
        if len(self._reduced) > 6:
            self._reduced.clear()
        idx = np.flatnonzero(np.repeat(work, k))
        A_w = self.K_aug[np.ix_(idx, idx)]
        entry = (work.copy(), idx, A_w, _StepLadder(A_w, config, spectrum=self.spectrum))
        self._reduced[key] = entry
        return entry


def _admm_core(A, c, lam, n_groups, config, z, y, ladder, iter_budget):
    """Over-relaxed ADMM on the split b = z for one fixed quadratic.

    Returns ``(z, iters, converged, y)``; convergence means the
    group-lasso KKT residual at z is at most
    max(admm_tol_abs, admm_tol_rel * ||c||). The step comes from the
    ladder, chosen by the start's sparsity, with occasional
    residual-balancing snap jumps as a safety net (disabled when the step
    is pinned by config). Iterations run in compiled fixed-step segments.
    """
    pk = c.size
    k = pk // n_groups
    tol = max(config.admm_tol_abs, config.admm_tol_rel * np.linalg.norm(c))
    density = np.count_nonzero(_group_norms(z, n_groups)) / n_groups
    m = 0 if density > 0.5 else ladder.sparse_m
    F_inv, tau = ladder(m)
    mu_max = ladder.mu_max
    z = z.copy()
    w = y / tau
    alpha = config.admm_relax
    jumps = 0
    total = 0
    c = np.ascontiguousarray(c)
    while total < iter_budget:
        segment = min(_ADAPT_EVERY, iter_budget - total)
        done, converged, r_norm, s_norm = admm_segment(
            F_inv, A, c, lam, tau, alpha, z, w, k, tol, mu_max, segment
        )
        total += done
        if converged:
            return z, total, True, tau * w
        if (jumps < _ADAPT_MAX_JUMPS and config.admm_step is None
                and s_norm > 0 and r_norm > 0):
            # residual balancing: one snap jump toward tau * sqrt(r/s)
            ratio = r_norm / s_norm
            if ratio > _ADAPT_RATIO or ratio < 1.0 / _ADAPT_RATIO:
                dm = int(np.clip(round(0.5 * np.log2(ratio)), -12, 12))
                if dm and -_M_RANGE <= m + dm <= _M_RANGE:
                    m += dm
                    jumps += 1
                    y = tau * w
                    F_inv, tau = ladder(m)
                    w = y / tau
    return z, total, False, tau * w


def inner_group_lasso(K_aug, J_aug, lam, n_groups, config,
                      start=None, dual_start=None, step_provider=None):
    """Approximately minimize 0.5 b'K_aug b - b'J_aug + lam sum_j ||b_j||_2.

    The pk coordinates are partitioned into ``n_groups`` contiguous groups
    of equal size, and the problem is solved by ADMM. Returns
    ``(b, n_iters, converged, dual)``: on convergence the group-lasso KKT
    residual at b is at most max(admm_tol_abs, admm_tol_rel * ||J_aug||).
    ``dual`` is the unscaled ADMM dual, reusable as ``dual_start`` to warm
    start the next solve.

    While the solution support is small, ADMM runs on the working set (the
    warm start's active groups plus any groups violating dual feasibility)
    and the result is certified against the full problem, growing the set
    until no violations remain; dense solves fall back to the full system.
    ``step_provider`` (a :class:`_StepLadder`) lets callers share the full
    system's factorizations across many solves, since the system matrix
    does not depend on the penalty weight.
    """
    J_aug = np.asarray(J_aug, dtype=float)
    pk = J_aug.size
    if pk % n_groups:
        raise ValueError("group count must divide the coordinate count")
    k = pk // n_groups
    tol = max(config.admm_tol_abs, config.admm_tol_rel * np.linalg.norm(J_aug))

    if lam == 0.0:
        # unpenalized limit: plain linear solve
        try:
            f = cho_factor(K_aug, lower=True, check_finite=False)
            b = cho_solve(f, J_aug, check_finite=False)
        except np.linalg.LinAlgError:
            b = np.linalg.lstsq(K_aug, J_aug, rcond=None)[0]
        res = _stationarity(K_aug @ b - J_aug, b, 0.0, n_groups)
        ok = res <= max(tol, 1e-8 * (1 + np.linalg.norm(J_aug)))
        return b, 1, ok, np.zeros(pk)

    if step_provider is None:
        step_provider = _StepLadder(K_aug, config)

    z = np.zeros(pk) if start is None else np.asarray(start, dtype=float).copy()
    y = np.zeros(pk) if dual_start is None else np.asarray(dual_start, dtype=float).copy()

    g = _sparse_quad_grad(K_aug, z, J_aug, n_groups)
    if _stationarity(g, z, lam, n_groups) <= tol:
        return z, 0, True, y

    # working set: active groups of the start plus dual-infeasible groups
    gnorms = np.sqrt(np.einsum("ij,ij->i", g.reshape(n_groups, k), g.reshape(n_groups, k)))
    work = (_group_norms(z, n_groups) > 0) | (gnorms > lam)
    total = 0
    for _ in range(_WORKSET_ROUNDS):
        if work.sum() > _WORKSET_FRACTION * n_groups:
            break
        work, idx, A_w, ladder_w = step_provider.reduced(work, k, config)
        groups_w = int(work.sum())
        z_w, it, ok, y_w = _admm_core(
            A_w, J_aug[idx], lam, groups_w, config,
            z[idx], y[idx], ladder_w, config.admm_iter_max - total,
        )
        total += it
        z = np.zeros(pk)
        z[idx] = z_w
        y[idx] = y_w
        # certify against the full problem
        g = _sparse_quad_grad(K_aug, z, J_aug, n_groups)
        if _stationarity(g, z, lam, n_groups) <= tol:
            return z, total, True, y
        if not ok or total >= config.admm_iter_max:
            return z, total, False, y
        gnorms = np.sqrt(np.einsum("ij,ij->i", g.reshape(n_groups, k), g.reshape(n_groups, k)))
        grown = work | (gnorms > lam)
        if grown.sum() == work.sum():
            # no new violators yet the certificate failed: fall through to
            # the full solve rather than looping
            break
        work = grown

    z, it, ok, y = _admm_core(
        K_aug, J_aug, lam, n_groups, config,
        z, y, step_provider, config.admm_iter_max - total,
    )
    return z, total + it, ok, y


def lambda_max(sys):
    """Largest group norm of J_tilde: b = 0 is optimal above this penalty."""
    return float(_group_norms(sys.J_tilde, sys.p).max())


def lambda_grid(lam_max, n_lambda=50, min_ratio=1e-3):
    """Geometric penalty path from lam_max down to min_ratio * lam_max."""
    if lam_max <= 0:
        return np.zeros(1)
    return lam_max * np.geomspace(1.0, min_ratio, n_lambda)


def augmented_lagrangian(sys, constraints, config, warm=None, _rho_cache=None,
                         _inner_dual=None):
    """Fit the zero-sum-constrained group lasso at one penalty value.

    Outer loop: minimize the rho-augmented Lagrangian in b (a group lasso,
    via :func:`inner_group_lasso`), then either escalate rho tenfold (when
    the constraint violation failed to contract below a quarter of the
    previous one) or take the dual ascent step. At least one outer
    iteration always runs so feasible starts (e.g. b = 0) still solve the
    problem. Stops once max|L~ b| <= epsilon or k_max is reached; reaching
    k_max flags the result instead of raising.

    ``warm`` optionally supplies (b0, u0) from a previous fit.
    ``_rho_cache`` shares factorizations across fits: the augmented system
    matrix depends on rho but not on the penalty weight.
    """
    Kt, Jt = sys.K_tilde, sys.J_tilde
    Lt = constraints.L_tilde
    pk = Jt.size
    qk = Lt.shape[0]
    lam = config.lam

    if warm is not None:
        b = np.asarray(warm[0], dtype=float).copy()
        u = np.asarray(warm[1], dtype=float).copy()
    else:
        b = np.zeros(pk)
        u = np.zeros(qk)

    cache = _rho_cache if _rho_cache is not None else {}
    if "_ltl" not in cache:
        cache["_ltl"] = Lt.T @ Lt if qk else None
    LtL = cache["_ltl"]

    def system_for(rho):
        key = float(rho)
        if key not in cache:
            A = Kt if LtL is None else Kt + rho * LtL
            cache[key] = (A, _StepLadder(A, config))
        return cache[key]

    err = err_prev = float(np.abs(Lt @ b).max()) if qk else 0.0
    rho = float(config.rho0)
    u_cert = u.copy()
    y_admm = np.zeros(pk) if _inner_dual is None else np.asarray(_inner_dual, dtype=float).copy()
    total_inner = 0
    outer = 0
    inner_ok = True
    converged = False
    while outer < config.k_max:
        outer += 1
        A, provider = system_for(rho)
        c = Jt - Lt.T @ u if qk else Jt
        b, iters, inner_ok, y_admm = inner_group_lasso(
            A, c, lam, sys.p, config,
            start=b, dual_start=y_admm, step_provider=provider,
        )
        total_inner += iters
        err = float(np.abs(Lt @ b).max()) if qk else 0.0
        u_cert = u + rho * (Lt @ b) if qk else u
        if err > 0.25 * err_prev:
            # tenfold escalation, capped only to keep the augmented system
            # factorizable in floating point
            rho = min(rho * 10.0, config.rho_max)
        else:
            u = u_cert
        err_prev = err
        if err <= config.epsilon:
            converged = inner_ok
            break

    if _rho_cache is not None:
        _rho_cache["_inner_dual"] = y_admm
    b_c = recover_control(sys, b)
    objective = float(
        0.5 * b @ (Kt @ b) - b @ Jt + lam * _group_norms(b, sys.p).sum()
    )
    return FitResult(
        b_hat=b, b_c_hat=b_c, u_hat=u_cert,
        outer_iters=outer, inner_iters_total=total_inner,
        constraint_residual=err, objective=objective, converged=converged,
    )


def solve_path(sys, constraints, lambdas, config, _rho_cache=None):
    """Fit a strictly decreasing penalty path with warm starts.

    Each fit starts from the previous (b, u); the factorization cache is
    shared across the whole path.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size > 1 and np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambdas must be strictly decreasing")
    cache = _rho_cache if _rho_cache is not None else {}
    fits = []
    warm = None
    for lam in lambdas:
        cfg = dataclasses.replace(config, lam=float(lam))
        fit = augmented_lagrangian(
            sys, constraints, cfg, warm=warm,
            _rho_cache=cache, _inner_dual=cache.get("_inner_dual"),
        )
        fits.append(fit)
        warm = (fit.b_hat, fit.u_hat)
    return fits


def kkt_residual(sys, constraints, fit, lam):
    """Optimality certificate: max of group stationarity and feasibility.

    With g = K~ b - J~ + L~' u, active groups contribute
    ||g_j + lam b_j / ||b_j|| || and inactive ones (||g_j|| - lam)_+;
    the result is combined with max|L~ b|.
    """
    b = fit.b_hat
    g = sys.K_tilde @ b - sys.J_tilde
    if constraints.L_tilde.shape[0]:
        g = g + constraints.L_tilde.T @ fit.u_hat
        feas = float(np.abs(constraints.L_tilde @ b).max())
    else:
        feas = 0.0
    return max(_stationarity(g, b, lam, sys.p), feas)


def predict(fit, Z, Z_c, spec, grid):
    """Fitted response curves on the grid: n x V.

    Reconstructs the coefficient curves from the basis and applies the
    concurrent model pointwise.
    """
    from .basis import basis_matrix

    Z = np.asarray(Z, dtype=float)
    Z_c = np.asarray(Z_c, dtype=float)
    phi = basis_matrix(spec, grid)
    k = spec.count
    beta = phi @ fit.b_hat.reshape(-1, k).T      # V x p
    beta_c = phi @ fit.b_c_hat.reshape(-1, k).T  # V x (p_c+1)
    return (
        np.einsum("npv,vp->nv", Z, beta)
        + np.einsum("ncv,vc->nv", Z_c, beta_c)
    )


def choose_references(block_sizes, rng):
    """One uniformly random reference part per block (absolute indices)."""
    refs = []
    start = 0
    for s in block_sizes:
        refs.append(start + int(rng.integers(s)))
        start += s
    return tuple(refs)


def alr_design(Z, block_sizes, references):
    """Reference-dropped log-ratio design: subtract and drop one part per block.

    Given the log-transformed design (n x p x V), returns the additive
    log-ratio design of shape n x (p - q) x V.
    """
    pieces = []
    start = 0
    for s, ref in zip(block_sizes, references):
        block = Z[:, start : start + s, :]
        local = ref - start
        if not 0 <= local < s:
            raise ValueError(f"reference {ref} outside its block")
        keep = [l for l in range(s) if l != local]
        pieces.append(block[:, keep, :] - block[:, local : local + 1, :])
        start += s
    return np.concatenate(pieces, axis=1)


def map_alr_coefficients(b_reduced, block_sizes, references, k):
    """Embed reduced coefficients into the full part set.

    The dropped reference part gets minus the block sum, so the mapped
    coefficients satisfy the zero-sum constraints exactly and produce the
    same fitted values on the full log design.
    """
    p = sum(block_sizes)
    B = np.zeros((p, k))
    Br = np.asarray(b_reduced, dtype=float).reshape(p - len(block_sizes), k)
    row = 0
    start = 0
    for s, ref in zip(block_sizes, references):
        local = ref - start
        rows = [l for l in range(s) if l != local]
        B[start + np.array(rows)] = Br[row : row + s - 1]
        B[ref] = -Br[row : row + s - 1].sum(axis=0)
        row += s - 1
        start += s
    return B.ravel()


def fit_bgl(sys, block_sizes, references, config, warm=None, _rho_cache=None):
    """Unconstrained group lasso on a reference-dropped design, mapped back.

    ``sys`` must be built from the :func:`alr_design` output (p - q
    predictor groups). The returned coefficients cover all p parts, with
    each reference reconstructed as minus its block sum, and record the
    reference choice.
    """
    q = len(block_sizes)
    if sys.p != sum(block_sizes) - q:
        raise ValueError("Gram system does not match the reference-dropped design")
    empty = ConstraintSet(
        L=np.zeros((0, sys.p)),
        L_tilde=np.zeros((0, sys.p * sys.k)),
        block_sizes=tuple(s - 1 for s in block_sizes),
        k=sys.k,
    )
    fit = augmented_lagrangian(sys, empty, config, warm=warm, _rho_cache=_rho_cache)
    b_full = map_alr_coefficients(fit.b_hat, block_sizes, references, sys.k)
    return dataclasses.replace(fit, b_hat=b_full, references=tuple(references))

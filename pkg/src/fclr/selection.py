"""Tuning and selection: cross-validation, one-SE rule, active sets, bootstrap.

Cross-validation is unit-level: whole curves are held out, since a curve is
the exchangeable unit in concurrent regression. The held-out error is the
trapezoid-weighted integrated squared residual averaged over held-out
curves, matching the training loss geometry.
"""

from dataclasses import dataclass, field

import numpy as np

from .basis import make_basis
from .design import build_constraints, build_controls, log_transform, no_constraints
from .quadrature import build_gram, trapezoid_weights
from .solver import (
    SolverConfig,
    alr_design,
    augmented_lagrangian,
    choose_references,
    lambda_grid,
    lambda_max,
    map_alr_coefficients,
    predict,
    solve_path,
)


@dataclass(frozen=True)
class CVResult:
    """Cross-validation surface over (lambda, k) pairs."""

    grid: tuple                 # ((lam, k), ...)
    mean_error: np.ndarray
    se_error: np.ndarray
    fold_errors: np.ndarray     # folds x pairs
    chosen: tuple               # (lam, k)


@dataclass(frozen=True)
class SelectionReport:
    """Active set and normalized integrated-norm shares of the curves."""

    active_set: tuple
    norms: np.ndarray
    shares: np.ndarray


@dataclass(frozen=True)
class TuningSpec:
    """How to tune (lambda, k): folds, grids and solver settings.

    ``folds`` is a fold count or "loo"; ``n_lambda`` geometric penalty
    values spanning [lambda_min_ratio, 1] * lambda_max are laid per k.
    """

    folds: object = 10
    k_grid: tuple = (4, 5, 6, 7, 8)
    order: int = 4
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3
    solver: SolverConfig = field(default_factory=SolverConfig)
    fold_seed: int = 0


def make_folds(n, folds, rng=None):
    """Unit-level partition: a list of held-out index arrays.

    ``folds`` may be an int (shuffled equal-size folds), "loo", or an
    explicit partition which is validated and passed through.
    """
    if isinstance(folds, str):
        if folds != "loo":
            raise ValueError(f"unknown fold spec {folds!r}")
        return [np.array([i]) for i in range(n)]
    if isinstance(folds, int):
        if not 2 <= folds <= n:
            raise ValueError(f"invalid folds: need 2 <= folds <= {n}, got {folds}")
        perm = np.arange(n) if rng is None else rng.permutation(n)
        return [np.sort(part) for part in np.array_split(perm, folds)]
    parts = [np.asarray(f, dtype=int) for f in folds]
    flat = np.concatenate(parts) if parts else np.array([], dtype=int)
    if sorted(flat.tolist()) != list(range(n)):
        raise ValueError("invalid folds: not a partition of the units")
    if any(len(part) == n for part in parts):
        raise ValueError("invalid folds: a fold leaves no training units")
    return parts


def _design_arrays(panel):
    return log_transform(panel), build_controls(panel), panel.response


def _fold_error(y_test, y_pred, weights):
    resid = y_test - y_pred
    return float(np.mean(resid ** 2 @ weights))


def cross_validate(panel, lambda_grid_values, k_grid, folds, config,
                   method="cgl", references=None, order=4,
                   n_lambda=50, lambda_min_ratio=1e-3, fold_seed=0):
    """CV surface over (lambda, k) with warm-started paths per fold.

    ``lambda_grid_values`` may be None (a geometric path is laid per k from
    the full-data lambda_max) or an explicit decreasing sequence applied to
    every k. ``method`` selects the constrained fit ("cgl") or the
    reference-dropped baseline ("bgl", requiring ``references``).
    Returns a :class:`CVResult` with the one-SE choice filled in.
    """
    Z, Z_c, y = _design_arrays(panel)
    grid_t = panel.grid
    weights = trapezoid_weights(grid_t)
    sizes = panel.block_sizes
    if method == "bgl":
        if references is None:
            raise ValueError("bgl needs reference indices")
        Z = alr_design(Z, sizes, references)
    elif method != "cgl":
        raise ValueError(f"unknown method {method!r}")

    fold_sets = make_folds(panel.n, folds,
                           rng=np.random.default_rng(fold_seed))
    domain = (grid_t[0], grid_t[-1])

    pairs = []
    lam_per_k = {}
    for k in k_grid:
        spec = make_basis(order, k, domain)
        if lambda_grid_values is None:
            sys_full = build_gram(Z, Z_c, y, spec, grid_t)
            lams = lambda_grid(lambda_max(sys_full), n_lambda, lambda_min_ratio)
        else:
            lams = np.asarray(lambda_grid_values, dtype=float)
        lam_per_k[k] = lams
        pairs.extend((float(lam), int(k)) for lam in lams)

    fold_errors = np.empty((len(fold_sets), len(pairs)))
    for fi, held in enumerate(fold_sets):
        train = np.setdiff1d(np.arange(panel.n), held)
        col = 0
        for k in k_grid:
            spec = make_basis(order, k, domain)
            sys_tr = build_gram(Z[train], Z_c[train], y[train], spec, grid_t)
            if method == "cgl":
                cons = build_constraints(sizes, k)
            else:
                cons = no_constraints(sys_tr.p, k)
            fits = solve_path(sys_tr, cons, lam_per_k[k], config)
            for fit in fits:
                pred = predict(fit, Z[held], Z_c[held], spec, grid_t)
                fold_errors[fi, col] = _fold_error(y[held], pred, weights)
                col += 1

    mean_error = fold_errors.mean(axis=0)
    n_folds = len(fold_sets)
    if n_folds > 1:
        se_error = fold_errors.std(axis=0, ddof=1) / np.sqrt(n_folds)
    else:
        se_error = np.zeros(len(pairs))
    cv = CVResult(
        grid=tuple(pairs),
        mean_error=mean_error,
        se_error=se_error,
        fold_errors=fold_errors,
        chosen=(np.nan, 0),
    )
    chosen = one_se_rule(cv)
    return CVResult(grid=cv.grid, mean_error=mean_error, se_error=se_error,
                    fold_errors=fold_errors, chosen=chosen)


def one_se_rule(cv):
    """Most parsimonious (lambda, k) within one SE of the CV minimum.

    Among pairs whose mean error is at most min_mean + SE(min), pick the
    largest lambda; ties on lambda break toward the smallest k.
    """
    if not cv.grid:
        raise ValueError("empty CV grid")
    means = np.asarray(cv.mean_error, dtype=float)
    i_min = int(np.argmin(means))
    threshold = means[i_min] + float(cv.se_error[i_min])
    best = None
    for (lam, k), m in zip(cv.grid, means):
        if m <= threshold:
            if best is None or lam > best[0] or (lam == best[0] and k < best[1]):
                best = (lam, k)
    return best


def fit_at(panel, lam, k, config, method="cgl", references=None, order=4):
    """Single fit of the given method at fixed (lambda, k).

    Returns ``(fit, spec)``; baseline coefficients come back mapped to the
    full part set.
    """
    import dataclasses

    Z, Z_c, y = _design_arrays(panel)
    spec = make_basis(order, k, (panel.grid[0], panel.grid[-1]))
    sizes = panel.block_sizes
    cfg = dataclasses.replace(config, lam=float(lam))
    if method == "cgl":
        sys_ = build_gram(Z, Z_c, y, spec, panel.grid)
        cons = build_constraints(sizes, k)
        fit = augmented_lagrangian(sys_, cons, cfg)
    elif method == "bgl":
        if references is None:
            raise ValueError("bgl needs reference indices")
        Z_r = alr_design(Z, sizes, references)
        sys_ = build_gram(Z_r, Z_c, y, spec, panel.grid)
        cons = no_constraints(sys_.p, k)
        fit = augmented_lagrangian(sys_, cons, cfg)
        fit = dataclasses.replace(
            fit,
            b_hat=map_alr_coefficients(fit.b_hat, sizes, references, k),
            references=tuple(references),
        )
    else:
        raise ValueError(f"unknown method {method!r}")
    return fit, spec


def tune_and_fit(panel, tuning, method="cgl", references=None):
    """Cross-validate, apply the one-SE rule, and refit on all units.

    The baseline's reference parts must be supplied (chosen once per
    dataset) so folds and the final fit agree. Returns
    ``(fit, spec, cv)``.
    """
    cv = cross_validate(
        panel, None, tuning.k_grid, tuning.folds, tuning.solver,
        method=method, references=references, order=tuning.order,
        n_lambda=tuning.n_lambda, lambda_min_ratio=tuning.lambda_min_ratio,
        fold_seed=tuning.fold_seed,
    )
    lam_star, k_star = cv.chosen
    fit, spec = fit_at(panel, lam_star, k_star, tuning.solver, method=method,
                       references=references, order=tuning.order)
    return fit, spec, cv


def curve_values(fit, spec, times, p):
    """Coefficient curves evaluated on a grid: p x len(times)."""
    from .basis import basis_matrix

    phi = basis_matrix(spec, times)
    B = fit.b_hat.reshape(p, spec.count)
    return B @ phi.T


def active_set(fit, spec, grid, p):
    """Curves whose share of total integrated norm reaches 1/p.

    Integrated norms use the trapezoid rule on the observation grid; an
    all-zero fit yields an empty set with all-zero shares.
    """
    beta = curve_values(fit, spec, grid, p)
    w = trapezoid_weights(grid)
    norms = np.sqrt(beta ** 2 @ w)
    total = norms.sum()
    if total == 0:
        return SelectionReport(active_set=(), norms=norms,
                               shares=np.zeros(p))
    shares = norms / total
    active = tuple(int(j) for j in np.flatnonzero(shares >= 1.0 / p))
    return SelectionReport(active_set=active, norms=norms, shares=shares)


def relative_magnitude(fit, spec, block_sizes, windows, points_per_window=101):
    """Share of squared-norm mass per block over each time window.

    For window [a, b], block j's share is sum_l int_a^b beta_jl(t)^2 dt
    normalized across blocks; shares per window sum to 1.
    """
    p = sum(block_sizes)
    lo, hi = spec.domain
    out = np.empty((len(windows), len(block_sizes)))
    starts = np.concatenate([[0], np.cumsum(block_sizes)])
    for wi, (a, b) in enumerate(windows):
        if not (lo <= a < b <= hi):
            raise ValueError(f"window [{a}, {b}] outside domain [{lo}, {hi}]")
        ts = np.linspace(a, b, points_per_window)
        beta = curve_values(fit, spec, ts, p)
        w = trapezoid_weights(ts)
        mass = beta ** 2 @ w
        block_mass = np.array([
            mass[starts[j]:starts[j + 1]].sum() for j in range(len(block_sizes))
        ])
        total = block_mass.sum()
        if total == 0:
            raise ValueError(f"undefined share: all coefficients vanish on [{a}, {b}]")
        out[wi] = block_mass / total
    return out


def bootstrap_stability(panel, n_boot, tuning, seed, threads=1):
    """Per-curve selection proportions over unit resamples.

    Each replicate resamples units with replacement, retunes (lambda, k)
    with the given spec, refits, and records the active set. Replicate
    seeds derive from (seed, replicate), so results are reproducible and
    independent of the worker count.
    """
    if n_boot < 1:
        raise ValueError("need at least one bootstrap replicate")
    p = panel.p

    def one(rep):
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            rng = np.random.default_rng(np.random.SeedSequence((seed, rep)))
            idx = rng.integers(panel.n, size=panel.n)
            sample = panel.subset(idx)
            fit, spec, _ = tune_and_fit(sample, tuning)
            report = active_set(fit, spec, sample.grid, p)
            out = np.zeros(p)
            out[list(report.active_set)] = 1.0
            return out

    if threads > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=threads, backend="loky")(
            delayed(one)(rep) for rep in range(n_boot)
        )
    else:
        rows = [one(rep) for rep in range(n_boot)]
    return np.mean(rows, axis=0)

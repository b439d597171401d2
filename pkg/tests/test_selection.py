import numpy as np
import pytest

from fclr import SolverConfig, make_basis
from fclr.selection import (
    CVResult,
    TuningSpec,
    active_set,
    bootstrap_stability,
    cross_validate,
    curve_values,
    fit_at,
    make_folds,
    one_se_rule,
    relative_magnitude,
    tune_and_fit,
)
from fclr.simulation import (
    SimConfig,
    calibrate_noise,
    gen_compositions,
    gen_response,
    make_panel,
    signal_matrix,
    truth_coefficients,
)
from fclr.solver import FitResult


def sim_panel(n=16, p=8, q=2, snr=8.0, seed=0, n_times=10):
    cfg = SimConfig(n=n, p=p, q=q, snr=snr, n_times=n_times, replicates=1,
                    seed=seed)
    rng = np.random.default_rng(seed)
    truth = truth_or_simple(cfg, rng)
    blocks = gen_compositions(cfg, rng)
    signal = signal_with(blocks, truth, cfg)
    sigma2 = calibrate_noise(signal, cfg.snr)
    y = signal + np.sqrt(sigma2) * rng.standard_normal(signal.shape)
    return make_panel(cfg, blocks, y), cfg


def truth_or_simple(cfg, rng):
    # small zero-sum truth: +/- on the first two parts of each block
    B = np.zeros((cfg.p, 5))
    step = cfg.p // cfg.q
    for j in range(cfg.q):
        B[j * step] = [1.0, -0.5, 0.5, -1.0, 1.0]
        B[j * step + 1] = -B[j * step]
    from fclr.simulation import TruthCoefficients

    return TruthCoefficients(B=B, S=tuple(
        i for j in range(cfg.q) for i in (j * step, j * step + 1)
    ))


def signal_with(blocks, truth, cfg):
    from fclr.simulation import signal_matrix

    return signal_matrix(blocks, truth, cfg.grid)


def make_fit(b, p, k, qk=0):
    return FitResult(
        b_hat=np.asarray(b, dtype=float).ravel(), b_c_hat=np.zeros(k),
        u_hat=np.zeros(qk), outer_iters=1, inner_iters_total=1,
        constraint_residual=0.0, objective=0.0, converged=True,
    )


class TestMakeFolds:
    def test_loo(self):
        folds = make_folds(7, "loo")
        assert len(folds) == 7
        assert all(len(f) == 1 for f in folds)

    def test_ten_fold_on_fifty(self):
        folds = make_folds(50, 10, rng=np.random.default_rng(0))
        assert len(folds) == 10
        assert all(len(f) == 5 for f in folds)
        assert sorted(np.concatenate(folds).tolist()) == list(range(50))

    def test_explicit_partition_passthrough(self):
        folds = make_folds(4, [[0, 2], [1, 3]])
        assert [f.tolist() for f in folds] == [[0, 2], [1, 3]]

    def test_bad_partition_rejected(self):
        with pytest.raises(ValueError, match="invalid folds"):
            make_folds(4, [[0, 1], [1, 2, 3]])

    def test_fold_leaving_no_training_rejected(self):
        with pytest.raises(ValueError, match="invalid folds"):
            make_folds(3, [[0, 1, 2]])


class TestOneSeRule:
    def _cv(self, lams, ks, means, ses):
        grid = tuple((l, k) for l, k in zip(lams, ks))
        return CVResult(grid=grid, mean_error=np.array(means),
                        se_error=np.array(ses),
                        fold_errors=np.zeros((2, len(grid))),
                        chosen=(np.nan, 0))

    def test_threshold_picks_larger_lambda(self):
        cv = self._cv([1.0, 0.1, 0.01], [5, 5, 5],
                      [2.0, 1.0, 0.9], [0.1, 0.1, 0.1])
        assert one_se_rule(cv) == (0.1, 5)

    def test_all_equal_means_maximal_parsimony(self):
        cv = self._cv([1.0, 1.0, 0.5], [6, 4, 4], [1.0, 1.0, 1.0],
                      [0.0, 0.0, 0.0])
        assert one_se_rule(cv) == (1.0, 4)

    def test_single_point(self):
        cv = self._cv([0.3], [5], [2.0], [0.5])
        assert one_se_rule(cv) == (0.3, 5)

    def test_never_below_minimizer(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            lams = np.sort(rng.uniform(0.01, 2.0, size=8))[::-1]
            means = rng.uniform(0.5, 2.0, size=8)
            ses = rng.uniform(0.0, 0.3, size=8)
            cv = self._cv(lams, [5] * 8, means, ses)
            lam_star, _ = one_se_rule(cv)
            assert lam_star >= lams[np.argmin(means)]

    def test_empty_grid(self):
        cv = CVResult(grid=(), mean_error=np.array([]),
                      se_error=np.array([]), fold_errors=np.zeros((0, 0)),
                      chosen=(np.nan, 0))
        with pytest.raises(ValueError):
            one_se_rule(cv)


class TestActiveSet:
    def test_clear_split(self):
        spec = make_basis(2, 2, (0.0, 1.0))
        grid = np.linspace(0, 1, 5)
        fit = make_fit([[0.0, 0.0], [1.0, 1.0]], 2, 2)
        report = active_set(fit, spec, grid, 2)
        assert report.active_set == (1,)
        assert report.shares[1] == pytest.approx(1.0)

    def test_equal_norms_all_selected(self):
        spec = make_basis(2, 2, (0.0, 1.0))
        grid = np.linspace(0, 1, 5)
        fit = make_fit([[1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]], 3, 2)
        report = active_set(fit, spec, grid, 3)
        assert report.active_set == (0, 1, 2)
        assert np.allclose(report.shares, 1 / 3)

    def test_all_zero_fit_empty(self):
        spec = make_basis(2, 3, (0.0, 1.0))
        grid = np.linspace(0, 1, 5)
        report = active_set(make_fit(np.zeros(9), 3, 3), spec, grid, 3)
        assert report.active_set == ()
        assert np.allclose(report.shares, 0.0)

    def test_share_arithmetic(self):
        # constant curves via partition of unity: norms proportional to the
        # coefficient magnitude
        spec = make_basis(3, 4, (0.0, 1.0))
        grid = np.linspace(0, 1, 9)
        coefs = np.zeros((4, 4))
        coefs[0] = 3.0
        coefs[1] = 1.0
        report = active_set(make_fit(coefs, 4, 4), spec, grid, 4)
        assert np.allclose(report.shares, [0.75, 0.25, 0.0, 0.0])
        assert report.active_set == (0, 1)

    def test_scale_invariance(self):
        spec = make_basis(2, 2, (0.0, 1.0))
        grid = np.linspace(0, 1, 7)
        rng = np.random.default_rng(1)
        b = rng.normal(size=(5, 2))
        r1 = active_set(make_fit(b, 5, 2), spec, grid, 5)
        r2 = active_set(make_fit(17.3 * b, 5, 2), spec, grid, 5)
        assert r1.active_set == r2.active_set
        assert np.allclose(r1.shares, r2.shares)


class TestRelativeMagnitude:
    def test_single_block_share_one(self):
        spec = make_basis(2, 3, (0.0, 1.0))
        fit = make_fit(np.ones((2, 3)), 2, 3)
        shares = relative_magnitude(fit, spec, (2,), [(0.0, 1.0)])
        assert np.allclose(shares, 1.0)

    def test_shares_sum_to_one_per_window(self):
        spec = make_basis(3, 4, (0.0, 2.0))
        rng = np.random.default_rng(2)
        fit = make_fit(rng.normal(size=(6, 4)), 6, 4)
        shares = relative_magnitude(fit, spec, (3, 3),
                                    [(0.0, 1.0), (0.5, 1.5), (1.0, 2.0)])
        assert shares.shape == (3, 2)
        assert np.allclose(shares.sum(axis=1), 1.0, atol=1e-12)

    def test_constant_curves_closed_form(self):
        # constant coefficient curves (all-equal basis coefficients) give
        # window shares proportional to the squared constants
        spec = make_basis(3, 4, (0.0, 1.0))
        coefs = np.vstack([np.full(4, 2.0), np.full(4, 1.0), np.full(4, 1.0),
                           np.full(4, 2.0)])
        fit = make_fit(coefs, 4, 4)
        shares = relative_magnitude(fit, spec, (2, 2), [(0.2, 0.7)])
        # block masses: 4 + 1 vs 1 + 4: equal shares
        assert np.allclose(shares, 0.5)

    def test_window_outside_domain_rejected(self):
        spec = make_basis(2, 2, (0.0, 1.0))
        fit = make_fit(np.ones((2, 2)), 2, 2)
        with pytest.raises(ValueError, match="outside domain"):
            relative_magnitude(fit, spec, (2,), [(0.5, 1.5)])

    def test_zero_window_rejected(self):
        spec = make_basis(2, 2, (0.0, 1.0))
        fit = make_fit(np.zeros((2, 2)), 2, 2)
        with pytest.raises(ValueError, match="undefined share"):
            relative_magnitude(fit, spec, (2,), [(0.0, 1.0)])


class TestCrossValidate:
    def test_perfect_generalization_limit(self):
        # zero noise and a fitting basis that contains the truth: the CV
        # error at tiny lambda approaches zero
        panel, cfg = sim_panel(n=12, p=4, q=1, snr=1e12, seed=3, n_times=8)
        cv = cross_validate(panel, None, (5,), 4, SolverConfig(),
                            n_lambda=12, lambda_min_ratio=1e-6)
        by_lam = {lam: m for (lam, k), m in zip(cv.grid, cv.mean_error)}
        lams = sorted(by_lam)
        assert by_lam[lams[0]] < 1e-6 * by_lam[lams[-1]]

    def test_fold_errors_shape_and_se(self):
        panel, _ = sim_panel(n=10, p=4, q=2, seed=4, n_times=6)
        cv = cross_validate(panel, None, (4, 5), 5, SolverConfig(), n_lambda=6)
        assert cv.fold_errors.shape == (5, 12)
        assert np.all(cv.se_error >= 0)
        assert cv.chosen in cv.grid

    def test_invariant_to_fold_order(self):
        panel, _ = sim_panel(n=8, p=4, q=1, seed=5, n_times=6)
        folds = [np.array([0, 1]), np.array([2, 3]), np.array([4, 5]),
                 np.array([6, 7])]
        cv1 = cross_validate(panel, None, (4,), folds, SolverConfig(),
                             n_lambda=5)
        cv2 = cross_validate(panel, None, (4,), folds[::-1], SolverConfig(),
                             n_lambda=5)
        assert np.allclose(np.sort(cv1.mean_error), np.sort(cv2.mean_error))
        assert cv1.chosen == cv2.chosen

    def test_explicit_lambda_grid(self):
        panel, _ = sim_panel(n=8, p=4, q=1, seed=6, n_times=6)
        cv = cross_validate(panel, [1.0, 0.1], (4,), 4, SolverConfig())
        assert cv.grid == ((1.0, 4), (0.1, 4))

    def test_bgl_requires_references(self):
        panel, _ = sim_panel(n=8, p=4, q=1, seed=7, n_times=6)
        with pytest.raises(ValueError, match="reference"):
            cross_validate(panel, None, (4,), 4, SolverConfig(), method="bgl")


class TestTuneAndFit:
    def test_recovers_strong_signal(self):
        panel, cfg = sim_panel(n=14, p=6, q=2, snr=50.0, seed=8, n_times=8)
        tuning = TuningSpec(folds=7, k_grid=(4,), n_lambda=20,
                            lambda_min_ratio=1e-3)
        fit, spec, cv = tune_and_fit(panel, tuning)
        report = active_set(fit, spec, panel.grid, cfg.p)
        assert set(report.active_set) == {0, 1, 3, 4}

    def test_lambda_override_skips_cv(self):
        panel, cfg = sim_panel(n=8, p=4, q=1, seed=9, n_times=6)
        fit, spec = fit_at(panel, 0.5, 4, SolverConfig())
        assert fit.converged
        assert spec.count == 4


class TestBootstrapStability:
    def test_single_replicate_binary(self):
        panel, cfg = sim_panel(n=10, p=4, q=1, snr=30.0, seed=10, n_times=6)
        tuning = TuningSpec(folds=5, k_grid=(4,), n_lambda=8)
        props = bootstrap_stability(panel, 1, tuning, seed=0)
        assert props.shape == (4,)
        assert set(np.unique(props)).issubset({0.0, 1.0})

    def test_reproducible_with_seed(self):
        panel, cfg = sim_panel(n=10, p=4, q=1, snr=30.0, seed=11, n_times=6)
        tuning = TuningSpec(folds=5, k_grid=(4,), n_lambda=8)
        p1 = bootstrap_stability(panel, 3, tuning, seed=42)
        p2 = bootstrap_stability(panel, 3, tuning, seed=42)
        assert np.array_equal(p1, p2)

    def test_strong_signal_selected_consistently(self):
        panel, cfg = sim_panel(n=14, p=4, q=1, snr=50.0, seed=12, n_times=8)
        tuning = TuningSpec(folds=7, k_grid=(4,), n_lambda=12)
        props = bootstrap_stability(panel, 10, tuning, seed=1)
        assert props[0] >= 0.9
        assert props[1] >= 0.9

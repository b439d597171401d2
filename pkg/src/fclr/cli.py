"""Command-line interface: ingestion checks, fitting, tuning, bootstrap,
simulation, and importance reports.

All commands are deterministic given their inputs, flags, and seed. Outputs
are CSV files in the directory given by --out (or the FCLR_OUT environment
variable). Exit codes: 0 success, 1 input error, 2 non-convergence.
"""

import configparser
import csv
import sys

import click
import numpy as np

from .design import build_constraints, build_controls, log_transform
from .ingest import ingest_dataset, read_blocks_spec
from .quadrature import build_gram
from .selection import (
    TuningSpec,
    active_set,
    bootstrap_stability,
    cross_validate,
    curve_values,
    fit_at,
    relative_magnitude,
    tune_and_fit,
)
from .simulation import run_study, scenario_by_name, study_tuning
from .solver import SolverConfig, kkt_residual

CURVE_POINTS = 201


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(directory, name, header, rows):
    path = directory / name
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(c) for c in row])
    return path


def _series_names(panel):
    names = []
    for bname, parts in zip(panel.block_names, panel.part_names):
        names.extend(f"{bname}:{part}" for part in parts)
    return names


def _control_names(blocks_spec_path):
    spec = read_blocks_spec(blocks_spec_path)
    return ["intercept"] + [f"control:{s}" for s in spec.controls]


def _load_config(ctx, param, value):
    if value is None:
        return None
    parser = configparser.ConfigParser()
    with open(value) as fh:
        parser.read_file(fh)
    ctx.default_map = ctx.default_map or {}
    for section in parser.sections():
        ctx.default_map.setdefault(section, {}).update(
            {k.replace("-", "_"): v for k, v in parser[section].items()}
        )
    return value


def _parse_k_grid(text):
    try:
        ks = tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise click.BadParameter(f"bad k grid {text!r}") from None
    if not ks:
        raise click.BadParameter("empty k grid")
    return ks


def _parse_folds(text):
    text = str(text).strip().lower()
    if text == "loo":
        return "loo"
    try:
        return int(text)
    except ValueError:
        raise click.BadParameter(f"folds must be an integer or 'loo', got {text!r}") from None


def _tuning_from_options(folds, k_grid, n_lambda, lambda_min_ratio, seed):
    return TuningSpec(
        folds=_parse_folds(folds),
        k_grid=_parse_k_grid(k_grid),
        n_lambda=int(n_lambda),
        lambda_min_ratio=float(lambda_min_ratio),
        solver=SolverConfig(),
        fold_seed=int(seed),
    )


out_option = click.option(
    "--out", "-o", envvar="FCLR_OUT", default=".", show_default=True,
    type=click.Path(file_okay=False, writable=True),
    help="Output directory (or set FCLR_OUT).",
)
grid_policy_option = click.option(
    "--grid-policy", type=click.Choice(["intersect", "error"]),
    default="intersect", show_default=True,
    help="How to handle (unit, time) holes in the data.",
)


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              callback=_load_config, expose_value=False, is_eager=True,
              help="INI file with per-command option defaults; flags override it.")
def main():
    """Sparse functional concurrent log-contrast regression."""


@main.command("ingest-check")
@click.argument("data_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("blocks_spec", type=click.Path(exists=True, dir_okay=False))
@grid_policy_option
def cmd_ingest_check(data_csv, blocks_spec, grid_policy):
    """Validate a dataset and print a short summary."""
    try:
        panel = ingest_dataset(data_csv, blocks_spec, grid_policy)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"units: {panel.n}")
    click.echo(f"times: {panel.n_times} ({panel.grid[0]:g} .. {panel.grid[-1]:g})")
    click.echo(f"blocks: {panel.q} with sizes {list(panel.block_sizes)}")
    click.echo(f"controls: {panel.n_controls}")
    click.echo("ok")


def _panel_or_exit(data_csv, blocks_spec, grid_policy):
    try:
        return ingest_dataset(data_csv, blocks_spec, grid_policy)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _ensure_out(out):
    from pathlib import Path

    directory = Path(out)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


@main.command("fit")
@click.argument("data_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("blocks_spec", type=click.Path(exists=True, dir_okay=False))
@out_option
@grid_policy_option
@click.option("--lam", type=float, default=None,
              help="Penalty override; skips cross-validation.")
@click.option("--k", "k_fixed", type=int, default=None,
              help="Basis size override (with --lam; alone it pins the CV grid).")
@click.option("--folds", default="10", show_default=True,
              help="CV folds: an integer or 'loo'.")
@click.option("--k-grid", default="4,5,6,7,8", show_default=True)
@click.option("--n-lambda", default=50, show_default=True)
@click.option("--lambda-min-ratio", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True, help="Fold shuffling seed.")
@click.option("--max-outer", default=50, show_default=True,
              help="Outer iteration cap of the constraint loop.")
def cmd_fit(data_csv, blocks_spec, out, grid_policy, lam, k_fixed, folds,
            k_grid, n_lambda, lambda_min_ratio, seed, max_outer):
    """Fit the constrained model, tuning (lambda, k) by CV unless overridden.

    Writes coefficients.csv, curves.csv, diagnostics.csv.
    """
    panel = _panel_or_exit(data_csv, blocks_spec, grid_policy)
    directory = _ensure_out(out)
    tuning = _tuning_from_options(folds, k_grid, n_lambda, lambda_min_ratio, seed)
    if int(max_outer) != 50:
        tuning = TuningSpec(
            folds=tuning.folds, k_grid=tuning.k_grid, order=tuning.order,
            n_lambda=tuning.n_lambda, lambda_min_ratio=tuning.lambda_min_ratio,
            solver=SolverConfig(k_max=int(max_outer)),
            fold_seed=tuning.fold_seed,
        )
    if k_fixed is not None:
        tuning = TuningSpec(
            folds=tuning.folds, k_grid=(int(k_fixed),), order=tuning.order,
            n_lambda=tuning.n_lambda, lambda_min_ratio=tuning.lambda_min_ratio,
            solver=tuning.solver, fold_seed=tuning.fold_seed,
        )
    try:
        if lam is not None:
            k_use = int(k_fixed) if k_fixed is not None else 5
            fit, spec = fit_at(panel, lam, k_use, tuning.solver)
            lam_star, k_star = float(lam), k_use
        else:
            fit, spec, cv = tune_and_fit(panel, tuning)
            lam_star, k_star = cv.chosen
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)

    k = spec.count
    names = _series_names(panel)
    ctrl_names = _control_names(blocks_spec)
    B = fit.b_hat.reshape(panel.p, k)
    Bc = fit.b_c_hat.reshape(len(ctrl_names), k)
    rows = [
        (name, i, B[j, i])
        for j, name in enumerate(names) for i in range(k)
    ] + [
        (name, i, Bc[j, i])
        for j, name in enumerate(ctrl_names) for i in range(k)
    ]
    _write_csv(directory, "coefficients.csv", ["series", "basis_index", "value"], rows)

    from .basis import basis_matrix

    ts = np.linspace(panel.grid[0], panel.grid[-1], CURVE_POINTS)
    beta = curve_values(fit, spec, ts, panel.p)
    beta_c = Bc @ basis_matrix(spec, ts).T
    curve_rows = [
        (name, t, beta[j, i])
        for j, name in enumerate(names) for i, t in enumerate(ts)
    ] + [
        (name, t, beta_c[j, i])
        for j, name in enumerate(ctrl_names) for i, t in enumerate(ts)
    ]
    _write_csv(directory, "curves.csv", ["series", "time", "value"], curve_rows)

    Z = log_transform(panel)
    Z_c = build_controls(panel)
    sys_ = build_gram(Z, Z_c, panel.response, spec, panel.grid)
    cons = build_constraints(panel.block_sizes, k)
    kkt = kkt_residual(sys_, cons, fit, lam_star)
    _write_csv(
        directory, "diagnostics.csv",
        ["lambda", "k", "converged", "constraint_residual", "kkt_residual",
         "outer_iters", "inner_iters_total", "objective"],
        [(lam_star, k_star, fit.converged, fit.constraint_residual, kkt,
          fit.outer_iters, fit.inner_iters_total, fit.objective)],
    )
    if not fit.converged:
        click.echo("warning: fit did not converge; outputs written", err=True)
        sys.exit(2)
    click.echo(f"fit converged: lambda={lam_star:g}, k={k_star}")


@main.command("cv")
@click.argument("data_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("blocks_spec", type=click.Path(exists=True, dir_okay=False))
@out_option
@grid_policy_option
@click.option("--folds", default="10", show_default=True)
@click.option("--k-grid", default="4,5,6,7,8", show_default=True)
@click.option("--n-lambda", default=50, show_default=True)
@click.option("--lambda-min-ratio", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_cv(data_csv, blocks_spec, out, grid_policy, folds, k_grid, n_lambda,
           lambda_min_ratio, seed):
    """Cross-validate (lambda, k) and write the CV surface (cv.csv)."""
    panel = _panel_or_exit(data_csv, blocks_spec, grid_policy)
    directory = _ensure_out(out)
    tuning = _tuning_from_options(folds, k_grid, n_lambda, lambda_min_ratio, seed)
    try:
        cv = cross_validate(
            panel, None, tuning.k_grid, tuning.folds, tuning.solver,
            order=tuning.order, n_lambda=tuning.n_lambda,
            lambda_min_ratio=tuning.lambda_min_ratio, fold_seed=tuning.fold_seed,
        )
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    rows = [
        (lam, k, m, s, int((lam, k) == cv.chosen))
        for (lam, k), m, s in zip(cv.grid, cv.mean_error, cv.se_error)
    ]
    _write_csv(directory, "cv.csv",
               ["lambda", "k", "mean_error", "se_error", "chosen"], rows)
    click.echo(f"chosen: lambda={cv.chosen[0]:g}, k={cv.chosen[1]}")


@main.command("bootstrap")
@click.argument("data_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("blocks_spec", type=click.Path(exists=True, dir_okay=False))
@out_option
@grid_policy_option
@click.option("--replicates", "-B", default=500, show_default=True)
@click.option("--folds", default="loo", show_default=True)
@click.option("--k-grid", default="4,5,6,7,8", show_default=True)
@click.option("--n-lambda", default=50, show_default=True)
@click.option("--lambda-min-ratio", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=1, show_default=True)
def cmd_bootstrap(data_csv, blocks_spec, out, grid_policy, replicates, folds,
                  k_grid, n_lambda, lambda_min_ratio, seed, threads):
    """Bootstrap selection stability; writes stability.csv."""
    panel = _panel_or_exit(data_csv, blocks_spec, grid_policy)
    directory = _ensure_out(out)
    tuning = _tuning_from_options(folds, k_grid, n_lambda, lambda_min_ratio, seed)
    try:
        props = bootstrap_stability(panel, replicates, tuning, seed=seed,
                                    threads=threads)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    rows = list(zip(_series_names(panel), props))
    _write_csv(directory, "stability.csv",
               ["series", "selection_proportion"], rows)
    click.echo(f"bootstrap done: {replicates} replicates")


@main.command("simulate")
@out_option
@click.option("--scenario", multiple=True, required=True,
              help="Named scenario (e.g. table3-row1 or n50-p40-q4-rx0.2-rt0.2-snr2); repeatable.")
@click.option("--replicates", default=100, show_default=True)
@click.option("--methods", default="cgl,bgl", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=1, show_default=True)
@click.option("--test-size", default=1000, show_default=True)
def cmd_simulate(out, scenario, replicates, methods, seed, threads, test_size):
    """Run the replicated synthetic study; writes results.csv."""
    directory = _ensure_out(out)
    try:
        scenarios = [scenario_by_name(s, replicates=replicates, seed=seed)
                     for s in scenario]
        method_list = tuple(m.strip() for m in methods.split(",") if m.strip())
        for m in method_list:
            if m not in ("cgl", "bgl"):
                raise ValueError(f"unknown method {m!r}")
        rows = run_study(scenarios, methods=method_list, tuning=study_tuning(),
                         threads=threads, test_size=test_size)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    out_rows = [
        (r["n"], r["p"], r["q"], r["rho_x"], r["rho_t"], r["snr"],
         r["replicates"], r["method"], r["metric"], r["mean"], r["se"],
         r["n_converged"])
        for r in rows
    ]
    _write_csv(directory, "results.csv",
               ["n", "p", "q", "rho_x", "rho_t", "snr", "replicates",
                "method", "metric", "mean", "se", "n_converged"], out_rows)
    click.echo(f"study done: {len(scenario)} scenario(s)")


def _parse_windows(text, domain):
    text = str(text).strip().lower()
    if text == "auto":
        lo, hi = domain
        if hi - lo <= 1.0:
            return [(lo, hi)]
        starts = np.arange(lo, hi - 1.0 + 1e-12, 1.0)
        return [(float(s), float(s + 1.0)) for s in starts]
    windows = []
    for piece in text.split(","):
        a, _, b = piece.partition(":")
        try:
            windows.append((float(a), float(b)))
        except ValueError:
            raise click.BadParameter(f"bad window {piece!r}") from None
    return windows


@main.command("importance")
@click.argument("data_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("blocks_spec", type=click.Path(exists=True, dir_okay=False))
@out_option
@grid_policy_option
@click.option("--windows", default="auto", show_default=True,
              help="'auto' (unit-length windows) or 'a:b,c:d,...'.")
@click.option("--lam", type=float, default=None)
@click.option("--k", "k_fixed", type=int, default=None)
@click.option("--folds", default="10", show_default=True)
@click.option("--k-grid", default="4,5,6,7,8", show_default=True)
@click.option("--n-lambda", default=50, show_default=True)
@click.option("--lambda-min-ratio", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_importance(data_csv, blocks_spec, out, grid_policy, windows, lam,
                   k_fixed, folds, k_grid, n_lambda, lambda_min_ratio, seed):
    """Relative squared-norm shares per block over time windows."""
    panel = _panel_or_exit(data_csv, blocks_spec, grid_policy)
    directory = _ensure_out(out)
    tuning = _tuning_from_options(folds, k_grid, n_lambda, lambda_min_ratio, seed)
    try:
        if lam is not None:
            k_use = int(k_fixed) if k_fixed is not None else 5
            fit, spec = fit_at(panel, lam, k_use, tuning.solver)
        else:
            fit, spec, _ = tune_and_fit(panel, tuning)
        wins = _parse_windows(windows, spec.domain)
        shares = relative_magnitude(fit, spec, panel.block_sizes, wins)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    rows = [
        (panel.block_names[j] if panel.block_names else f"block{j + 1}",
         wins[w][0], wins[w][1], shares[w, j])
        for w in range(len(wins)) for j in range(panel.q)
    ]
    _write_csv(directory, "importance.csv",
               ["block", "window_start", "window_end", "share"], rows)
    click.echo(f"importance done: {len(wins)} window(s)")


if __name__ == "__main__":
    main()

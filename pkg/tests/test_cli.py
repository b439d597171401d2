import csv
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from fclr.cli import main
from fclr.ingest import ingest_dataset, read_blocks_spec

DATA = Path(__file__).parent / "data"
TOY = str(DATA / "toy.csv")
BLOCKS = str(DATA / "toy_blocks.ini")
GOLDEN = DATA / "golden"

FIT_FLAGS = ["--folds", "3", "--k-grid", "4,5", "--n-lambda", "8", "--seed", "0"]


def run_cli(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


def write_lines(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerows(rows)


def minimal_blocks_ini(path, values="shares"):
    path.write_text(
        "[meta]\n"
        "version = 1\n"
        f"values = {values}\n"
        "response = y\n"
        "\n"
        "[block:b]\n"
        "parts = a1, a2\n"
    )


class TestIngest:
    def test_fixture_round_trip(self):
        panel = ingest_dataset(TOY, BLOCKS)
        assert panel.n == 3
        assert panel.n_times == 5
        assert panel.q == 2
        assert panel.p == 5
        assert panel.n_controls == 1
        assert panel.block_names == ("adult", "young")
        # the grid keeps the year gap
        assert np.allclose(panel.grid, [2000, 2001, 2002, 2004, 2005])

    def test_zero_count_becomes_half_before_closure(self):
        panel = ingest_dataset(TOY, BLOCKS)
        # unit alpha, time 2001 has counts (0, 25, 30) -> (0.5, 25, 30)/55.5
        i, t = 0, 1
        got = panel.blocks[0][i, :, t]
        assert np.allclose(got, np.array([0.5, 25.0, 30.0]) / 55.5)

    def test_unknown_series_with_line_number(self, tmp_path):
        ini = tmp_path / "b.ini"
        minimal_blocks_ini(ini)
        data = tmp_path / "d.csv"
        write_lines(data, [
            ["unit", "time", "series", "value"],
            ["u1", "0", "y", "1.0"],
            ["u1", "0", "mystery", "1.0"],
        ])
        with pytest.raises(ValueError, match="line 3.*unknown series"):
            ingest_dataset(str(data), str(ini))

    def test_non_numeric_value_with_line_number(self, tmp_path):
        ini = tmp_path / "b.ini"
        minimal_blocks_ini(ini)
        data = tmp_path / "d.csv"
        write_lines(data, [
            ["unit", "time", "series", "value"],
            ["u1", "0", "y", "abc"],
        ])
        with pytest.raises(ValueError, match="line 2.*non-numeric"):
            ingest_dataset(str(data), str(ini))

    def test_share_sum_violation(self, tmp_path):
        ini = tmp_path / "b.ini"
        minimal_blocks_ini(ini, values="shares")
        data = tmp_path / "d.csv"
        rows = [["unit", "time", "series", "value"]]
        for t in (0, 1):
            for u in ("u1", "u2"):
                rows += [
                    [u, str(t), "y", "1.0"],
                    [u, str(t), "a1", "0.6"],
                    [u, str(t), "a2", "0.6"],
                ]
        write_lines(data, rows)
        with pytest.raises(ValueError, match="shares sum to"):
            ingest_dataset(str(data), str(ini))

    def test_all_zero_count_row(self, tmp_path):
        ini = tmp_path / "b.ini"
        minimal_blocks_ini(ini, values="counts")
        data = tmp_path / "d.csv"
        rows = [["unit", "time", "series", "value"]]
        for t in (0, 1):
            rows += [
                ["u1", str(t), "y", "1.0"],
                ["u1", str(t), "a1", "0"],
                ["u1", str(t), "a2", "0"],
            ]
        write_lines(data, rows)
        with pytest.raises(ValueError, match="all-zero counts"):
            ingest_dataset(str(data), str(ini))

    def test_grid_policy_error_names_missing_cell(self, tmp_path):
        ini = tmp_path / "b.ini"
        minimal_blocks_ini(ini)
        data = tmp_path / "d.csv"
        rows = [["unit", "time", "series", "value"]]
        for u in ("u1", "u2"):
            for t in (0, 1):
                if u == "u2" and t == 1:
                    continue
                rows += [
                    [u, str(t), "y", "1.0"],
                    [u, str(t), "a1", "0.5"],
                    [u, str(t), "a2", "0.5"],
                ]
        # u2 has only time 0: intersect keeps 1 time -> too short; error names it
        write_lines(data, rows)
        with pytest.raises(ValueError, match="missing cell.*u2.*time=1"):
            ingest_dataset(str(data), str(ini), grid_policy="error")
        with pytest.raises(ValueError, match="common grid"):
            ingest_dataset(str(data), str(ini), grid_policy="intersect")

    def test_grid_policy_intersect_drops_partial_times(self, tmp_path):
        ini = tmp_path / "b.ini"
        minimal_blocks_ini(ini)
        data = tmp_path / "d.csv"
        rows = [["unit", "time", "series", "value"]]
        for u in ("u1", "u2"):
            times = (0, 1, 2) if u == "u1" else (0, 2)
            for t in times:
                rows += [
                    [u, str(t), "y", "1.0"],
                    [u, str(t), "a1", "0.5"],
                    [u, str(t), "a2", "0.5"],
                ]
        write_lines(data, rows)
        panel = ingest_dataset(str(data), str(ini))
        assert np.allclose(panel.grid, [0, 2])

    def test_blocks_spec_validation(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[meta]\nversion = 2\nresponse = y\n\n[block:b]\nparts = a, b\n")
        with pytest.raises(ValueError, match="version"):
            read_blocks_spec(str(bad))
        bad.write_text("[meta]\nversion = 1\nresponse = y\n")
        with pytest.raises(ValueError, match="no .block"):
            read_blocks_spec(str(bad))
        bad.write_text("[meta]\nversion = 1\nresponse = y\n\n[block:b]\nparts = a\n")
        with pytest.raises(ValueError, match="at least 2 parts"):
            read_blocks_spec(str(bad))


class TestCliCommands:
    def test_ingest_check_ok(self):
        res = run_cli(["ingest-check", TOY, BLOCKS])
        assert res.exit_code == 0
        assert "units: 3" in res.output
        assert "ok" in res.output

    def test_ingest_check_bad_input_exit_1(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("not,a,real,header\n")
        res = run_cli(["ingest-check", str(bad), BLOCKS])
        assert res.exit_code == 1
        assert "error" in res.output

    def test_fit_reproduces_golden_outputs(self, tmp_path):
        res = run_cli(["fit", TOY, BLOCKS, "-o", str(tmp_path)] + FIT_FLAGS)
        assert res.exit_code == 0
        for name in ("coefficients.csv", "curves.csv", "diagnostics.csv"):
            got = (tmp_path / name).read_bytes()
            want = (GOLDEN / name).read_bytes()
            assert got == want, f"{name} differs from golden copy"

    def test_fit_lambda_override_skips_cv(self, tmp_path):
        res = run_cli(["fit", TOY, BLOCKS, "-o", str(tmp_path),
                       "--lam", "0.5", "--k", "4"])
        assert res.exit_code == 0
        with open(tmp_path / "diagnostics.csv") as fh:
            row = list(csv.DictReader(fh))[0]
        assert float(row["lambda"]) == 0.5
        assert int(row["k"]) == 4

    def test_fit_malformed_csv_exit_1(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("unit,time,series,value\nu1,zero,e0,1.0\n")
        res = run_cli(["fit", str(bad), BLOCKS, "-o", str(tmp_path)])
        assert res.exit_code == 1

    def test_fit_nonconvergence_exit_2_still_writes(self, tmp_path):
        # an active fit capped at one outer iteration cannot reach the
        # constraint tolerance
        res = run_cli(["fit", TOY, BLOCKS, "-o", str(tmp_path),
                       "--lam", "0.001", "--k", "4", "--max-outer", "1"])
        assert res.exit_code == 2
        with open(tmp_path / "diagnostics.csv") as fh:
            row = list(csv.DictReader(fh))[0]
        assert row["converged"] == "False"
        assert (tmp_path / "coefficients.csv").exists()
        assert (tmp_path / "curves.csv").exists()

    def test_cv_table_internally_consistent(self, tmp_path):
        res = run_cli(["cv", TOY, BLOCKS, "-o", str(tmp_path),
                       "--folds", "3", "--k-grid", "4,5", "--n-lambda", "8"])
        assert res.exit_code == 0
        with open(tmp_path / "cv.csv") as fh:
            rows = list(csv.DictReader(fh))
        means = np.array([float(r["mean_error"]) for r in rows])
        ses = np.array([float(r["se_error"]) for r in rows])
        lams = np.array([float(r["lambda"]) for r in rows])
        ks = np.array([int(r["k"]) for r in rows])
        chosen = [i for i, r in enumerate(rows) if r["chosen"] == "1"]
        assert len(chosen) == 1
        i_min = int(np.argmin(means))
        threshold = means[i_min] + ses[i_min]
        ok = means <= threshold
        best = max(
            np.flatnonzero(ok),
            key=lambda i: (lams[i], -ks[i]),
        )
        assert chosen[0] == best

    def test_cv_loo_runs_n_folds(self, tmp_path):
        res = run_cli(["cv", TOY, BLOCKS, "-o", str(tmp_path),
                       "--folds", "loo", "--k-grid", "4", "--n-lambda", "4"])
        assert res.exit_code == 0

    def test_bootstrap_single_replicate_binary(self, tmp_path):
        res = run_cli(["bootstrap", TOY, BLOCKS, "-o", str(tmp_path),
                       "-B", "1", "--folds", "3", "--k-grid", "4",
                       "--n-lambda", "6"])
        assert res.exit_code == 0
        with open(tmp_path / "stability.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5
        assert all(float(r["selection_proportion"]) in (0.0, 1.0) for r in rows)

    def test_bootstrap_seed_reproducible(self, tmp_path):
        args = ["bootstrap", TOY, BLOCKS, "-B", "2", "--folds", "3",
                "--k-grid", "4", "--n-lambda", "6", "--seed", "11"]
        run_cli(args + ["-o", str(tmp_path / "a")])
        run_cli(args + ["-o", str(tmp_path / "b")])
        a = (tmp_path / "a" / "stability.csv").read_bytes()
        b = (tmp_path / "b" / "stability.csv").read_bytes()
        assert a == b

    def test_simulate_unknown_scenario_exit_1(self, tmp_path):
        res = run_cli(["simulate", "--scenario", "table9-row1",
                       "-o", str(tmp_path)])
        assert res.exit_code == 1

    def test_simulate_smoke_and_thread_invariance(self, tmp_path):
        args = ["simulate", "--scenario", "n12-p20-q4-rx0.2-rt0.2-snr2",
                "--replicates", "2", "--methods", "cgl", "--test-size", "40"]
        r1 = run_cli(args + ["-o", str(tmp_path / "t1"), "--threads", "1"])
        r2 = run_cli(args + ["-o", str(tmp_path / "t2"), "--threads", "2"])
        assert r1.exit_code == 0 and r2.exit_code == 0
        a = (tmp_path / "t1" / "results.csv").read_bytes()
        b = (tmp_path / "t2" / "results.csv").read_bytes()
        assert a == b

    def test_importance_shares_sum_to_one(self, tmp_path):
        res = run_cli(["importance", TOY, BLOCKS, "-o", str(tmp_path),
                       "--lam", "0.05", "--k", "4"])
        assert res.exit_code == 0
        with open(tmp_path / "importance.csv") as fh:
            rows = list(csv.DictReader(fh))
        by_window = {}
        for r in rows:
            by_window.setdefault(r["window_start"], []).append(
                float(r["share"])
            )
        for shares in by_window.values():
            assert sum(shares) == pytest.approx(1.0)

    def test_importance_window_outside_domain_exit_1(self, tmp_path):
        res = run_cli(["importance", TOY, BLOCKS, "-o", str(tmp_path),
                       "--lam", "0.05", "--k", "4",
                       "--windows", "1990:1991"])
        assert res.exit_code == 1

    def test_config_file_supplies_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[cv]\nfolds = 3\nk-grid = 4\nn-lambda = 4\n")
        res = run_cli(["--config", str(cfg), "cv", TOY, BLOCKS,
                       "-o", str(tmp_path)])
        assert res.exit_code == 0
        with open(tmp_path / "cv.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4          # one k, four lambdas
        assert all(int(r["k"]) == 4 for r in rows)

    def test_ingest_export_reingest_round_trip(self, tmp_path):
        # golden round trip: write the ingested panel back to long format
        # and re-ingest it (as shares) reproducing the panel exactly
        panel = ingest_dataset(TOY, BLOCKS)
        data = tmp_path / "export.csv"
        rows = [["unit", "time", "series", "value"]]
        for i, u in enumerate(panel.units):
            for t_i, t in enumerate(panel.grid):
                rows.append([u, repr(float(t)), "e0",
                             repr(float(panel.response[i, t_i]))])
                rows.append([u, repr(float(t)), "gdp",
                             repr(float(panel.controls[i, 0, t_i]))])
                for b, names in zip(panel.blocks, panel.part_names):
                    for j, name in enumerate(names):
                        rows.append([u, repr(float(t)), name,
                                     repr(float(b[i, j, t_i]))])
        write_lines(data, rows)
        ini = tmp_path / "b.ini"
        ini.write_text(
            "[meta]\nversion = 1\nvalues = shares\nresponse = e0\n\n"
            "[controls]\nseries = gdp\n\n"
            "[block:adult]\nparts = NEOP, CIRC, EXT\n\n"
            "[block:young]\nparts = INFE, RESP\n"
        )
        again = ingest_dataset(str(data), str(ini))
        assert again.units == panel.units
        assert np.array_equal(again.grid, panel.grid)
        assert np.array_equal(again.response, panel.response)
        assert np.array_equal(again.controls, panel.controls)
        for a, b in zip(again.blocks, panel.blocks):
            assert np.array_equal(a, b)

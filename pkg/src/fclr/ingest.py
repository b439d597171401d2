"""Dataset ingestion: long-format CSV plus a blocks spec into a panel.

The data file is long format with header ``unit,time,series,value``. The
blocks spec is an INI file declaring the response series, the composition
blocks with their part series, optional control series, and whether the
composition values are raw counts (zeros replaced by 0.5, then closed) or
already-closed shares (validated, then re-closed to machine precision).
"""

import configparser
import csv

import numpy as np

from .design import FunctionalPanel, close, zero_replace

SHARE_SUM_TOL = 1e-6


class BlocksSpec:
    """Parsed blocks spec: response, ordered blocks, controls, value kind."""

    def __init__(self, response, blocks, controls, values, version):
        self.response = response
        self.blocks = blocks        # list of (block_name, [part_series])
        self.controls = controls    # list of series names
        self.values = values        # "counts" | "shares"
        self.version = version

    @property
    def part_series(self):
        return [s for _, parts in self.blocks for s in parts]


def read_blocks_spec(path):
    """Parse and validate the INI blocks spec."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if "meta" not in parser:
        raise ValueError(f"{path}: missing [meta] section")
    meta = parser["meta"]
    version = meta.get("version")
    if version != "1":
        raise ValueError(f"{path}: unsupported blocks spec version {version!r}")
    values = meta.get("values", "shares").strip().lower()
    if values not in ("counts", "shares"):
        raise ValueError(f"{path}: values must be 'counts' or 'shares', got {values!r}")
    response = meta.get("response", "").strip()
    if not response:
        raise ValueError(f"{path}: [meta] must name a response series")
    controls = []
    if "controls" in parser:
        raw = parser["controls"].get("series", "")
        controls = [s.strip() for s in raw.split(",") if s.strip()]
    blocks = []
    for section in parser.sections():
        if not section.startswith("block:"):
            continue
        name = section.removeprefix("block:")
        raw = parser[section].get("parts", "")
        parts = [s.strip() for s in raw.split(",") if s.strip()]
        if len(parts) < 2:
            raise ValueError(f"{path}: block {name!r} needs at least 2 parts")
        blocks.append((name, parts))
    if not blocks:
        raise ValueError(f"{path}: no [block:NAME] sections found")
    declared = [response] + controls + [s for _, parts in blocks for s in parts]
    dupes = {s for s in declared if declared.count(s) > 1}
    if dupes:
        raise ValueError(f"{path}: series declared more than once: {sorted(dupes)}")
    return BlocksSpec(response, blocks, controls, values, version)


def _read_long_csv(path, known_series):
    """Parse the long CSV into {(unit, time, series): value} with line info."""
    cells = {}
    lines = {}
    units = []
    seen_units = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["unit", "time", "series", "value"]:
            raise ValueError(f"{path}: expected header 'unit,time,series,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path} line {lineno}: expected 4 fields, got {len(row)}")
            unit, time_s, series, value_s = (c.strip() for c in row)
            if series not in known_series:
                raise ValueError(f"{path} line {lineno}: unknown series {series!r}")
            try:
                t = float(time_s)
                v = float(value_s)
            except ValueError:
                raise ValueError(
                    f"{path} line {lineno}: non-numeric time or value"
                ) from None
            if not np.isfinite(v) or not np.isfinite(t):
                raise ValueError(f"{path} line {lineno}: non-finite time or value")
            key = (unit, t, series)
            if key in cells:
                raise ValueError(
                    f"{path} line {lineno}: duplicate cell for unit={unit!r}, "
                    f"time={t}, series={series!r}"
                )
            cells[key] = v
            lines[key] = lineno
            if unit not in seen_units:
                seen_units.add(unit)
                units.append(unit)
    if not cells:
        raise ValueError(f"{path}: no data rows")
    return cells, lines, units


def ingest_dataset(data_csv, blocks_spec_path, grid_policy="intersect"):
    """Build a validated panel from a long CSV and a blocks spec.

    ``grid_policy`` decides what to do with (unit, time) holes: "intersect"
    keeps times observed for every unit and series, "error" reports the
    first missing cell.
    """
    if grid_policy not in ("intersect", "error"):
        raise ValueError(f"unknown grid policy {grid_policy!r}")
    spec = read_blocks_spec(blocks_spec_path)
    series = [spec.response] + spec.controls + spec.part_series
    cells, lines, units = _read_long_csv(data_csv, set(series))

    all_times = sorted({t for (_, t, _) in cells})
    if grid_policy == "error":
        for unit in units:
            for t in all_times:
                for s in series:
                    if (unit, t, s) not in cells:
                        raise ValueError(
                            f"{data_csv}: missing cell unit={unit!r}, time={t}, "
                            f"series={s!r} (grid policy 'error')"
                        )
        grid = all_times
    else:
        grid = [
            t for t in all_times
            if all((u, t, s) in cells for u in units for s in series)
        ]
    if len(grid) < 2:
        raise ValueError(
            f"{data_csv}: common grid has {len(grid)} time point(s); need at least 2"
        )

    n, v = len(units), len(grid)

    def series_matrix(name):
        return np.array([[cells[(u, t, name)] for t in grid] for u in units])

    response = series_matrix(spec.response)
    controls = (
        np.stack([series_matrix(s) for s in spec.controls], axis=1)
        if spec.controls else np.zeros((n, 0, v))
    )

    blocks = []
    for bname, parts in spec.blocks:
        raw = np.stack([series_matrix(s) for s in parts], axis=1)  # n x p_j x v
        if spec.values == "counts":
            if np.any(raw < 0):
                bad = np.argwhere(raw < 0)[0]
                key = (units[bad[0]], grid[bad[2]], parts[bad[1]])
                raise ValueError(
                    f"{data_csv} line {lines[key]}: negative count for "
                    f"unit={key[0]!r}, time={key[1]}, series={key[2]!r}"
                )
            rows = np.transpose(raw, (0, 2, 1))     # n x v x p_j
            sums = rows.sum(axis=2)
            if np.any(sums == 0):
                iu, it = np.argwhere(sums == 0)[0]
                key = (units[iu], grid[it], parts[0])
                raise ValueError(
                    f"{data_csv} line {lines[key]}: all-zero counts in block "
                    f"{bname!r} for unit={units[iu]!r}, time={grid[it]}"
                )
            shares = close(zero_replace(rows))
        else:
            rows = np.transpose(raw, (0, 2, 1))
            if np.any(rows <= 0):
                iu, it, ip = np.argwhere(rows <= 0)[0]
                key = (units[iu], grid[it], parts[ip])
                raise ValueError(
                    f"{data_csv} line {lines[key]}: nonpositive share for "
                    f"unit={key[0]!r}, time={key[1]}, series={key[2]!r} "
                    f"(provide counts to apply zero replacement)"
                )
            sums = rows.sum(axis=2)
            if np.max(np.abs(sums - 1.0)) > SHARE_SUM_TOL:
                iu, it = np.argwhere(np.abs(sums - 1.0) > SHARE_SUM_TOL)[0]
                key = (units[iu], grid[it], parts[0])
                raise ValueError(
                    f"{data_csv} line {lines[key]}: block {bname!r} shares sum "
                    f"to {sums[iu, it]:.8f} for unit={units[iu]!r}, "
                    f"time={grid[it]} (tolerance {SHARE_SUM_TOL})"
                )
            shares = close(rows)
        blocks.append(np.transpose(shares, (0, 2, 1)))

    return FunctionalPanel(
        units=tuple(units),
        grid=np.array(grid),
        response=response,
        blocks=tuple(blocks),
        controls=controls,
        block_names=tuple(name for name, _ in spec.blocks),
        part_names=tuple(tuple(parts) for _, parts in spec.blocks),
    )

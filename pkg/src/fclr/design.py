"""Observed panels and the regression design built from them.

A :class:`FunctionalPanel` holds the raw dataset: a common time grid, one
response curve per unit, q blocks of compositional shares, and optional
control covariates. The functions here turn it into the pieces the solver
consumes: the log-transformed compositional design, the control matrix with
a leading intercept column, and the zero-sum constraint matrices.
"""

from dataclasses import dataclass, field

import numpy as np

COMPOSITION_TOL = 1e-8


@dataclass(frozen=True)
class FunctionalPanel:
    """Aligned panel of n units observed on a common increasing time grid.

    ``response`` is n x V; block j of ``blocks`` is n x p_j x V with each
    composition (fixed unit and time) strictly positive and summing to 1;
    ``controls`` is n x p_c x V and may have p_c = 0.
    """

    units: tuple
    grid: np.ndarray
    response: np.ndarray
    blocks: tuple
    controls: np.ndarray
    block_names: tuple = ()
    part_names: tuple = ()

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must be a 1-d sequence with at least 2 points")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        n, v = self.response.shape
        if len(self.units) != n:
            raise ValueError("unit labels do not match response rows")
        if v != grid.size:
            raise ValueError("response columns do not match grid length")
        if not np.all(np.isfinite(self.response)):
            raise ValueError("response contains non-finite values")
        for j, block in enumerate(self.blocks):
            if block.shape[0] != n or block.shape[2] != v:
                raise ValueError(f"block {j} shape {block.shape} inconsistent with panel")
            if np.any(block <= 0):
                raise ValueError(f"block {j} has nonpositive shares; compositions must be strictly positive")
            sums = block.sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > COMPOSITION_TOL:
                raise ValueError(f"block {j} rows do not sum to 1 within {COMPOSITION_TOL}")
        if self.controls.shape[0] != n or self.controls.shape[2] != v:
            raise ValueError("controls shape inconsistent with panel")
        object.__setattr__(self, "grid", grid)

    @property
    def n(self):
        return self.response.shape[0]

    @property
    def n_times(self):
        return self.grid.size

    @property
    def q(self):
        return len(self.blocks)

    @property
    def block_sizes(self):
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def p(self):
        return sum(self.block_sizes)

    @property
    def n_controls(self):
        return self.controls.shape[1]

    def subset(self, idx):
        """Panel restricted to the given unit indices (order preserved)."""
        idx = np.asarray(idx, dtype=int)
        return FunctionalPanel(
            units=tuple(self.units[i] for i in idx),
            grid=self.grid,
            response=self.response[idx],
            blocks=tuple(b[idx] for b in self.blocks),
            controls=self.controls[idx],
            block_names=self.block_names,
            part_names=self.part_names,
        )


@dataclass(frozen=True)
class ConstraintSet:
    """Zero-sum constraint matrices: L (q x p) and its basis expansion.

    ``L_tilde`` = L kron I_k has qk rows and pk columns; L_tilde @ b = 0
    forces every block's coefficients to sum to zero at each basis
    coordinate.
    """

    L: np.ndarray
    L_tilde: np.ndarray
    block_sizes: tuple
    k: int


def zero_replace(counts, epsilon=0.5):
    """Replace zero counts by ``epsilon`` (default 0.5, the max rounding error).

    Operates on nonnegative count arrays whose last axis indexes composition
    parts; positive entries are untouched. Closure downstream re-normalizes.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if np.any(counts.sum(axis=-1) == 0):
        raise ValueError("degenerate row: a composition row has all-zero counts")
    out = counts.copy()
    out[out == 0] = epsilon
    return out


def close(values):
    """Normalize strictly positive rows to unit sum (closure operation)."""
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("invalid composition: entries must be strictly positive")
    return values / values.sum(axis=-1, keepdims=True)


def log_transform(panel):
    """Elementwise log of the concatenated composition blocks: n x p x V."""
    z = np.concatenate(panel.blocks, axis=1)
    if np.any(z <= 0):
        raise ValueError(
            "invalid composition: zero or negative share; apply zero_replace and close first"
        )
    return np.log(z)


def build_controls(panel):
    """Control design with a leading all-ones intercept column: n x (p_c+1) x V."""
    n, v = panel.response.shape
    ones = np.ones((n, 1, v))
    return np.concatenate([ones, panel.controls], axis=1)


def build_constraints(block_sizes, k):
    """Zero-sum constraints for q blocks of the given sizes, expanded over k.

    Row j of L marks block j's parts; L_tilde = L kron I_k.
    """
    block_sizes = tuple(int(s) for s in block_sizes)
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    for j, s in enumerate(block_sizes):
        if s < 2:
            raise ValueError(
                f"degenerate block: block {j} has {s} part(s); zero-sum needs at least 2"
            )
    q = len(block_sizes)
    p = sum(block_sizes)
    L = np.zeros((q, p))
    start = 0
    for j, s in enumerate(block_sizes):
        L[j, start : start + s] = 1.0
        start += s
    L_tilde = np.kron(L, np.eye(k))
    return ConstraintSet(L=L, L_tilde=L_tilde, block_sizes=block_sizes, k=k)


def no_constraints(p, k):
    """Empty constraint set (used by the unconstrained baseline)."""
    return ConstraintSet(
        L=np.zeros((0, p)), L_tilde=np.zeros((0, p * k)), block_sizes=(), k=int(k)
    )

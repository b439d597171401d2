"""Clamped B-spline bases for representing coefficient curves.

Every coefficient curve in the model is written as a linear combination of
the same k B-spline basis functions. Bases are clamped (endpoint knots
repeated to full multiplicity) with equispaced interior knots, so they
interpolate at the domain endpoints and form a partition of unity.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class BasisSpec:
    """A clamped B-spline basis: ``count`` functions of order ``order``.

    ``order`` is the B-spline order d (piecewise polynomials of degree d-1).
    ``knots`` has length ``count + order``, with each endpoint repeated
    ``order`` times and ``count - order`` equispaced interior knots.
    """

    order: int
    count: int
    domain: tuple[float, float]
    knots: np.ndarray

    @property
    def degree(self):
        return self.order - 1


def make_basis(order, count, domain):
    """Build a clamped B-spline basis with equispaced interior knots.

    Parameters
    ----------
    order : int
        Spline order d >= 1 (degree d-1).
    count : int
        Number of basis functions k >= order.
    domain : (float, float)
        Closed evaluation interval, t_min < t_max.

    Returns
    -------
    BasisSpec
    """
    order = int(order)
    count = int(count)
    if order < 1:
        raise ValueError(f"invalid basis: order must be >= 1, got {order}")
    if count < order:
        raise ValueError(
            f"invalid basis: count ({count}) must be >= order ({order})"
        )
    t_min, t_max = float(domain[0]), float(domain[1])
    if not t_min < t_max:
        raise ValueError(f"invalid domain: need t_min < t_max, got [{t_min}, {t_max}]")
    # count - order interior knots, equispaced strictly inside the domain
    interior = np.linspace(t_min, t_max, count - order + 2)[1:-1]
    knots = np.concatenate(
        [np.full(order, t_min), interior, np.full(order, t_max)]
    )
    return BasisSpec(order=order, count=count, domain=(t_min, t_max), knots=knots)


def basis_matrix(spec, times):
    """Evaluate all basis functions on a grid: returns len(times) x count.

    The closed right endpoint is included (clamped convention), so the
    whole closed domain is evaluable. Values outside the domain raise.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    t_min, t_max = spec.domain
    if times.size and (times.min() < t_min or times.max() > t_max):
        bad = times[(times < t_min) | (times > t_max)][0]
        raise ValueError(
            f"out of domain: t={bad} not in [{t_min}, {t_max}]"
        )
    design = BSpline.design_matrix(times, spec.knots, spec.degree, extrapolate=False)
    return np.asarray(design.todense())


def eval_basis(spec, t):
    """Evaluate the k basis functions at a single time point.

    Returns a length-``count`` vector of nonnegative weights summing to 1,
    with at most ``order`` consecutive nonzero entries.
    """
    return basis_matrix(spec, [t])[0]


def expand_basis(spec, t, p):
    """Block-diagonal replication of the basis row for p coefficient curves.

    Returns the p x (p*count) matrix with the basis values at ``t`` repeated
    along the diagonal blocks, so that multiplying a stacked coefficient
    vector of length p*count yields the p curve values at ``t``.
    """
    p = int(p)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    phi = eval_basis(spec, t)
    return np.kron(np.eye(p), phi[None, :])

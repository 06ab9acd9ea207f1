"""
离散测度模块 (Discrete Measures)

Probability measures on a finite real grid: CDFs, moments, call functions,
Wasserstein distances, convex order and first-order dominance, and the
infinitesimal kinetic-energy diagnostic for density curves.

主要功能：
1. 构造 - point masses, atoms, discretized densities, Gaussians
2. 距离 - W1 (exact CDF identity), Wp (quantile functions)
3. 序关系 - convex order, first-order dominance, peacock verification
"""
import logging
from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from core.exceptions import NumericalError, ValidationError
from core.io_schema import GridMeasure, PeacockFamily, Verdict, trapezoid_cells

logger = logging.getLogger(__name__)

DEFAULT_QUANTILE_RESOLUTION = 4096
MEAN_TOL_REL = 1e-8
CALL_TOL = 1e-10
CDF_TOL = 1e-12

# strikes x atoms evaluated per chunk in call_function
_CHUNK = 2_000_000


# ------------------------------ Constructors ------------------------------ #

def point_mass(x: float, label: str = "") -> GridMeasure:
    return GridMeasure(np.array([float(x)]), np.array([1.0]), label)


def from_atoms(values, weights=None, label: str = "") -> GridMeasure:
    """
    Merge repeated atoms, sort and normalize

    Args:
        values: Atom locations (any order, repeats allowed)
        weights: Nonnegative masses, uniform when omitted
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if weights is None:
        weights = np.ones_like(values)
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size == 0 or values.shape != weights.shape:
        raise ValidationError("atoms and weights must be non-empty and of equal length")
    if np.any(weights < 0):
        raise ValidationError("atom weights must be nonnegative")
    grid, inverse = np.unique(values, return_inverse=True)
    merged = np.bincount(inverse, weights=weights, minlength=grid.size)
    total = merged.sum()
    if total <= 0:
        raise ValidationError("atoms carry no mass")
    return GridMeasure(grid, merged / total, label)


def from_density(grid, density, label: str = "") -> GridMeasure:
    """Discretize a density: weight = density x trapezoidal cell width, renormalized"""
    grid = np.asarray(grid, dtype=np.float64)
    density = np.clip(np.asarray(density, dtype=np.float64), 0.0, None)
    mass = density * trapezoid_cells(grid)
    total = mass.sum()
    if total <= 0:
        raise ValidationError("density integrates to zero on the grid")
    return GridMeasure(grid, mass / total, label)


def gaussian_measure(mean: float, std: float, grid=None, n: int = 401,
                     width: float = 8.0, label: str = "") -> GridMeasure:
    """N(mean, std^2) discretized on `grid` (default: n points over mean +- width*std)"""
    if std < 0:
        raise ValidationError("std must be nonnegative")
    if std == 0:
        return point_mass(mean, label)
    if grid is None:
        grid = np.linspace(mean - width * std, mean + width * std, n)
    grid = np.asarray(grid, dtype=np.float64)
    return from_density(grid, norm.pdf(grid, loc=mean, scale=std), label or f"N({mean:g},{std**2:g})")


def translate(m: GridMeasure, c: float) -> GridMeasure:
    return GridMeasure(m.grid + c, m.weights, m.label)


# ------------------------------ Functionals ------------------------------- #

def cdf(m: GridMeasure, x):
    """Right-continuous distribution function F(x) = m((-inf, x])"""
    cum = np.concatenate(([0.0], np.cumsum(m.weights)))
    cum[-1] = 1.0
    idx = np.searchsorted(m.grid, x, side="right")
    out = np.clip(cum[idx], 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def moment(m: GridMeasure, order: int = 1, center: float = 0.0) -> float:
    """Sum of w_i (x_i - center)^order for order 1 or 2"""
    if order not in (1, 2):
        raise ValidationError(f"moment order must be 1 or 2, got {order}")
    return float(m.weights @ (m.grid - center) ** order)


def call_function(m: GridMeasure, strike):
    """C(k) = sum of w_i (x_i - k)_+, vectorized over strikes"""
    strikes = np.atleast_1d(np.asarray(strike, dtype=np.float64))
    out = np.empty(strikes.size)
    step = max(1, _CHUNK // m.size)
    for start in range(0, strikes.size, step):
        k = strikes[start:start + step]
        out[start:start + step] = np.maximum(m.grid[None, :] - k[:, None], 0.0) @ m.weights
    return float(out[0]) if np.ndim(strike) == 0 else out


def quantile(m: GridMeasure, u, method: str = "step"):
    """
    Generalized inverse of the CDF

    method='step' is the exact left-continuous inverse of the atomic CDF;
    method='linear' spreads each weight uniformly over its trapezoidal cell,
    which is the right reading for discretized densities.
    """
    u = np.asarray(u, dtype=np.float64)
    cum = np.cumsum(m.weights)
    if method == "step" or m.size == 1:
        idx = np.minimum(np.searchsorted(cum, u, side="left"), m.size - 1)
        return m.grid[idx]
    if method != "linear":
        raise ValidationError(f"unknown quantile method {method!r}")
    edges = np.concatenate(([m.grid[0]], (m.grid[:-1] + m.grid[1:]) / 2, [m.grid[-1]]))
    cum_edges = np.concatenate(([0.0], cum))
    cum_edges[-1] = 1.0
    return np.interp(u, cum_edges, edges)


def w1_distance(m: GridMeasure, n: GridMeasure) -> float:
    """W1 via the 1-D Kantorovich identity: integral of |F_m - F_n| over the merged grid"""
    z = np.union1d(m.grid, n.grid)
    if z.size < 2:
        return 0.0
    gap = np.abs(cdf(m, z[:-1]) - cdf(n, z[:-1]))
    return float(gap @ np.diff(z))


def wp_distance(m: GridMeasure, n: GridMeasure, p: float = 2.0,
                resolution: int = DEFAULT_QUANTILE_RESOLUTION, method: str = "step") -> float:
    """Lp distance of quantile functions on a uniform probability partition"""
    if p < 1:
        raise ValidationError(f"Wasserstein order must be >= 1, got {p}")
    u = (np.arange(resolution) + 0.5) / resolution
    diff = np.abs(quantile(m, u, method) - quantile(n, u, method))
    return float(np.mean(diff ** p) ** (1.0 / p))


# ------------------------------ Order relations --------------------------- #

def check_convex_order(m: GridMeasure, n: GridMeasure, mean_tol_rel: float = MEAN_TOL_REL,
                       call_tol: float = CALL_TOL) -> Verdict:
    """
    凸序检验 (Convex order m <=_c n)

    Holds iff the means agree and the call function of n dominates that of
    m at every merged-grid strike; both calls are piecewise linear with
    kinks on the merged grid, so the check is exact.
    """
    mean_m, mean_n = m.mean, n.mean
    if abs(mean_m - mean_n) > mean_tol_rel * (1 + abs(mean_m)):
        return Verdict(False, None, f"means differ: {mean_m:.12g} vs {mean_n:.12g}",
                       abs(mean_m - mean_n))
    z = np.union1d(m.grid, n.grid)
    shortfall = call_function(m, z) - call_function(n, z)
    bad = np.flatnonzero(shortfall > call_tol)
    worst = float(max(shortfall.max(), 0.0))
    if bad.size:
        return Verdict(False, float(z[bad[0]]), "call function decreases", worst)
    return Verdict(True, None, "", worst)


def check_first_order_dominance(m: GridMeasure, n: GridMeasure, tol: float = CDF_TOL) -> Verdict:
    """n dominates m in first order iff F_n <= F_m on the merged grid"""
    z = np.union1d(m.grid, n.grid)
    excess = cdf(n, z) - cdf(m, z)
    bad = np.flatnonzero(excess > tol)
    worst = float(max(excess.max(), 0.0))
    if bad.size:
        return Verdict(False, float(z[bad[0]]), "distribution functions cross", worst)
    return Verdict(True, None, "", worst)


@dataclass(frozen=True)
class PeacockVerdict:
    holds: bool
    times: Optional[Tuple[float, float]] = None
    witness: Optional[float] = None
    reason: str = ""
    max_violation: float = 0.0

    def to_dict(self):
        return asdict(self)


def verify_peacock(fam: PeacockFamily, mean_tol_rel: float = MEAN_TOL_REL,
                   call_tol: float = CALL_TOL) -> PeacockVerdict:
    """Check convex-order monotonicity on every consecutive pair of the family"""
    worst = 0.0
    for i in range(len(fam) - 1):
        verdict = check_convex_order(fam.measures[i], fam.measures[i + 1], mean_tol_rel, call_tol)
        worst = max(worst, verdict.max_violation)
        if not verdict.holds:
            pair = (float(fam.times[i]), float(fam.times[i + 1]))
            logger.info(f"Peacock check failed between t={pair[0]:g} and t={pair[1]:g}: {verdict.reason}")
            return PeacockVerdict(False, pair, verdict.witness, verdict.reason, verdict.max_violation)
    return PeacockVerdict(True, None, None, "", worst)


def normalize_second_moment_clock(fam: PeacockFamily) -> PeacockFamily:
    """Re-time the family so that m2(mu_t) - m2(mu_t0) = t - t0"""
    m2 = np.array([moment(m, 2, 0.0) for m in fam.measures])
    new_times = fam.times[0] + (m2 - m2[0])
    if np.any(np.diff(new_times) <= 0):
        bad = int(np.argmin(np.diff(new_times)))
        raise ValidationError("second moment is not strictly increasing",
                              witness=float(fam.times[bad + 1]))
    return PeacockFamily(new_times, fam.measures, fam.label)


# ------------------------------ Kinetic diagnostic ------------------------ #

def score_velocity(m: GridMeasure) -> np.ndarray:
    """Horizontal transport speed -1/2 p'/p of a strictly positive density"""
    p = m.density
    if np.any(p <= 0):
        raise NumericalError("nonpositive density encountered",
                             {"witness": float(m.grid[np.argmin(p)])})
    return -0.5 * np.gradient(p, m.grid) / p


@dataclass(frozen=True)
class MetricDerivative:
    w2_rate: float
    fisher_rate_weighted: float
    fisher_rate_unweighted: float

    def to_dict(self):
        data = asdict(self)
        data["fisher_rate_paper"] = self.fisher_rate_unweighted
        return data


def metric_derivative_diag(fam: PeacockFamily, t: float, h: float,
                           resolution: int = DEFAULT_QUANTILE_RESOLUTION) -> MetricDerivative:
    """
    Compare the W2 speed of the curve t -> p_t with the kinetic energy of the score field

    w2_rate uses linear quantiles so that transports far below the grid
    spacing are resolved. Both Fisher forms are reported: with the density
    weight and without it.
    """
    if h <= 0:
        raise ValidationError("h must be positive", witness=h)
    p_t = fam.at(t)
    p_th = fam.at(t + h)
    velocity = score_velocity(p_t)
    cells = trapezoid_cells(p_t.grid)
    p = p_t.density
    w2 = wp_distance(p_t, p_th, 2.0, resolution, method="linear")
    weighted = 0.5 * np.sqrt(np.sum((2 * velocity) ** 2 * p * cells))
    unweighted = 0.5 * np.sqrt(np.sum((2 * velocity) ** 2 * cells))
    return MetricDerivative(w2 / h, float(weighted), float(unweighted))

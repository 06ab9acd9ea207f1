"""
看涨价格曲面模块 (Call Surface)

Closed-form Gaussian and lognormal call surfaces, surfaces priced from a
peacock, surface validation, and Breeden-Litzenberger density extraction
p_t = C_xx(t, .) on possibly nonuniform strike grids.
"""
import logging
from dataclasses import dataclass, asdict, field
from typing import List, Optional

import numpy as np
from scipy.stats import norm

from core.exceptions import ValidationError
from core.io_schema import ADDITIVE, MULTIPLICATIVE, CallSurface, GridMeasure, PeacockFamily
from measures import call_function, verify_peacock

logger = logging.getLogger(__name__)

CONVEXITY_TOL = 1e-10
SURFACE_TOL = 1e-10


# ------------------------------ Closed forms ------------------------------ #

def gaussian_surface(x0: float, variances, times, strikes) -> CallSurface:
    """
    C(t, x) = E[(x0 + sqrt(a(t)) Z - x)_+] for total variances a(t_i)

    Zero variance gives the intrinsic value (x0 - x)_+.
    """
    times = np.asarray(times, dtype=np.float64)
    strikes = np.asarray(strikes, dtype=np.float64)
    variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), times.shape)
    if np.any(variances < 0):
        raise ValidationError("variances must be nonnegative")
    scale = np.sqrt(variances)[:, None]
    moneyness = x0 - strikes[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(scale > 0, moneyness / np.where(scale > 0, scale, 1.0), 0.0)
        prices = np.where(scale > 0,
                          moneyness * norm.cdf(d) + scale * norm.pdf(d),
                          np.maximum(moneyness, 0.0))
    return CallSurface(times, strikes, prices, ADDITIVE, float(x0),
                       {"source": "gaussian", "x0": float(x0)})


def bachelier_surface(x0: float, vol: float, times, strikes) -> CallSurface:
    """Bachelier surface of x0 + vol * W_t"""
    if vol <= 0:
        raise ValidationError(f"vol must be positive, got {vol}")
    times = np.asarray(times, dtype=np.float64)
    surface = gaussian_surface(x0, vol ** 2 * times, times, strikes)
    surface.meta.update({"source": "bachelier", "vol": float(vol)})
    return surface


def lognormal_surface(s0: float, total_variances, times, strikes) -> CallSurface:
    """Zero-rate Black-Scholes prices with total log-variance w(t_i)"""
    times = np.asarray(times, dtype=np.float64)
    strikes = np.asarray(strikes, dtype=np.float64)
    if s0 <= 0 or np.any(strikes <= 0):
        raise ValidationError("lognormal surfaces need positive spot and strikes")
    w = np.broadcast_to(np.asarray(total_variances, dtype=np.float64), times.shape)
    if np.any(w < 0):
        raise ValidationError("total variances must be nonnegative")
    scale = np.sqrt(w)[:, None]
    log_m = np.log(s0 / strikes)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(scale > 0, scale, 1.0)
        d1 = (log_m + 0.5 * scale ** 2) / safe
        prices = np.where(scale > 0,
                          s0 * norm.cdf(d1) - strikes[None, :] * norm.cdf(d1 - scale),
                          np.maximum(s0 - strikes[None, :], 0.0))
    return CallSurface(times, strikes, prices, MULTIPLICATIVE, float(s0),
                       {"source": "lognormal", "s0": float(s0)})


def black_scholes_surface(s0: float, vol: float, times, strikes) -> CallSurface:
    """Constant-vol lognormal surface, multiplicative convention"""
    if vol <= 0:
        raise ValidationError(f"vol must be positive, got {vol}")
    times = np.asarray(times, dtype=np.float64)
    surface = lognormal_surface(s0, vol ** 2 * times, times, strikes)
    surface.meta.update({"source": "black_scholes", "vol": float(vol)})
    return surface


def surface_from_family(fam: PeacockFamily, strikes=None, convention: str = ADDITIVE) -> CallSurface:
    """
    Price every member of a verified peacock on a common strike grid

    Strikes default to the union of the member grids.
    """
    verdict = verify_peacock(fam)
    if not verdict.holds:
        raise ValidationError(f"family is not a peacock: {verdict.reason}",
                              witness={"times": verdict.times, "strike": verdict.witness})
    if strikes is None:
        strikes = np.unique(np.concatenate([m.grid for m in fam.measures]))
    strikes = np.asarray(strikes, dtype=np.float64)
    prices = np.vstack([call_function(m, strikes) for m in fam.measures])
    return CallSurface(fam.times, strikes, prices, convention, fam.measures[0].mean,
                       {"source": "family", "label": fam.label})


def implied_forward(s: CallSurface) -> float:
    """Mean of the marginals; read off the lowest strike when not stored"""
    if s.forward is not None:
        return float(s.forward)
    return float(s.prices[0, 0] + s.strikes[0])


# ------------------------------ Strike derivatives ------------------------ #

def second_derivative_weights(strikes: np.ndarray):
    """
    Three-point Lagrange weights for C_xx at interior strikes

    Returns (lower, centre, upper) coefficient vectors of length n - 2.
    """
    h1 = np.diff(strikes)[:-1]
    h2 = np.diff(strikes)[1:]
    lower = 2.0 / (h1 * (h1 + h2))
    centre = -2.0 / (h1 * h2)
    upper = 2.0 / (h2 * (h1 + h2))
    return lower, centre, upper


def strike_second_derivative(prices: np.ndarray, strikes: np.ndarray) -> np.ndarray:
    """C_xx at interior strikes along the last axis"""
    lower, centre, upper = second_derivative_weights(strikes)
    return lower * prices[..., :-2] + centre * prices[..., 1:-1] + upper * prices[..., 2:]


def second_differences(prices: np.ndarray, strikes: np.ndarray) -> np.ndarray:
    """Scale-free convexity measure C_xx * h1 * h2 (plain second difference on uniform grids)"""
    gaps = np.diff(strikes)
    return strike_second_derivative(prices, strikes) * gaps[:-1] * gaps[1:]


# ------------------------------ Density extraction ------------------------ #

@dataclass(frozen=True)
class DensityExtraction:
    measure: GridMeasure
    interior_mass: float
    raw_mass: float
    renormalization: float


def extract_density(s: CallSurface, t_index: int, tol: float = CONVEXITY_TOL) -> DensityExtraction:
    """
    Breeden-Litzenberger 提取 (density from the strike convexity of one row)

    Interior weights are C_xx times the cell width; the two edge strikes
    take the remaining mass from the boundary slopes, so a surface priced
    from a measure on the strike grid is inverted exactly.
    """
    row = s.prices[t_index]
    strikes = s.strikes
    if strikes.size < 3:
        raise ValidationError("at least three strikes are needed for C_xx")
    diffs = second_differences(row, strikes)
    bad = np.flatnonzero(diffs < -tol)
    if bad.size:
        raise ValidationError(f"row {t_index} is not convex in strike",
                              violations=[{"i": int(t_index), "j": int(j + 1), "amount": float(diffs[j])}
                                          for j in bad])
    gaps = np.diff(strikes)
    weights = np.empty_like(strikes)
    weights[1:-1] = strike_second_derivative(row, strikes) * (gaps[:-1] + gaps[1:]) / 2
    slope_first = (row[1] - row[0]) / gaps[0]
    slope_last = (row[-1] - row[-2]) / gaps[-1]
    weights[0] = 1.0 + slope_first
    weights[-1] = -slope_last
    interior = float(weights[1:-1].sum())
    raw = float(weights.sum())
    weights = np.clip(weights, 0.0, None)
    total = weights.sum()
    factor = 1.0 / total
    logger.debug(f"BL row {t_index}: interior mass {interior:.8f}, renormalization {factor:.10f}")
    measure = GridMeasure(strikes, weights * factor, f"bl(t={s.times[t_index]:g})")
    return DensityExtraction(measure, interior, raw, float(factor))


def bl_density(s: CallSurface, t_index: int) -> GridMeasure:
    return extract_density(s, t_index).measure


# ------------------------------ Validation -------------------------------- #

@dataclass(frozen=True)
class SurfaceViolation:
    kind: str
    i: int
    j: int
    amount: float


@dataclass
class SurfaceReport:
    violations: List[SurfaceViolation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def kinds(self):
        return sorted({v.kind for v in self.violations})

    def to_dict(self):
        return {"passed": self.passed, "violations": [asdict(v) for v in self.violations]}


def validate_surface(s: CallSurface, tol: float = SURFACE_TOL) -> SurfaceReport:
    """
    曲面校验 (Surface validation)

    Reports every node violating the intrinsic bound, discrete strike
    convexity, or monotonicity in time.
    """
    report = SurfaceReport()
    forward = implied_forward(s)
    intrinsic = np.maximum(forward - s.strikes, 0.0)[None, :]
    for i, j in zip(*np.nonzero(s.prices < intrinsic - tol)):
        report.violations.append(SurfaceViolation("intrinsic", int(i), int(j),
                                                  float(intrinsic[0, j] - s.prices[i, j])))
    if s.strikes.size >= 3:
        diffs = second_differences(s.prices, s.strikes)
        for i, j in zip(*np.nonzero(diffs < -tol)):
            report.violations.append(SurfaceViolation("convexity", int(i), int(j + 1), float(-diffs[i, j])))
    if s.times.size >= 2:
        drops = s.prices[:-1] - s.prices[1:]
        for i, j in zip(*np.nonzero(drops > tol)):
            report.violations.append(SurfaceViolation("monotonicity", int(i + 1), int(j), float(drops[i, j])))
    if report.violations:
        logger.warning(f"Surface validation found {len(report.violations)} violations: {report.kinds()}")
    return report

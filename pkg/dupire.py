"""
局部波动率模块 (Dupire Local Volatility)

Extracts sigma(t, x) from a call surface with Dupire's formula

    additive:        sigma^2 / 2 = C_t / C_xx
    multiplicative:  sigma^2 / 2 = C_t / (x^2 C_xx)

using finite differences: three-point Lagrange in strike, and in time
either central (second-order one-sided rows at both ends) or forward.
End rows fall back to a first-order difference where the one-sided
stencil turns negative.

主要功能：
1. 校准 - local_vol_additive / local_vol_multiplicative
2. 诊断 - implied_diffusion_check (forward-equation residual)
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.integrate import trapezoid

from call_surface import implied_forward, strike_second_derivative
from core.exceptions import ValidationError
from core.io_schema import (ADDITIVE, MULTIPLICATIVE, CONVENTIONS, CallSurface, ClampRecord,
                            LocalVolSurface, config_from_dict)

logger = logging.getLogger(__name__)

TIME_STENCILS = ("central", "forward")


@dataclass(frozen=True)
class DupireConfig:
    """
    校准参数 (Calibration knobs)

    cxx_floor and sigma_max default to surface-dependent values when None:
    1e-8 * price scale / median cell^2 and 10x the global implied scale.
    """
    cxx_floor: Optional[float] = None
    sigma_min: float = 0.0
    sigma_max: Optional[float] = None
    ct_tol: float = 1e-10  # largest tolerated price drop between time rows
    time_stencil: str = "central"

    def __post_init__(self):
        if self.time_stencil not in TIME_STENCILS:
            raise ValidationError(f"unknown time stencil {self.time_stencil!r}")
        if self.sigma_min < 0:
            raise ValidationError("sigma_min must be nonnegative")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DupireConfig":
        return config_from_dict(cls, data)


# ------------------------------ Derivatives ------------------------------- #

def time_derivative(prices: np.ndarray, times: np.ndarray, stencil: str = "central") -> np.ndarray:
    """
    C_t on every time row

    Args:
        prices: (n_times, n_strikes) matrix
        times: Increasing time nodes
        stencil: 'central' (second order, nonuniform-aware) or 'forward'
    """
    n = times.size
    out = np.zeros_like(prices)
    if n == 1:
        return out
    dt = np.diff(times)
    if n == 2 or stencil == "forward":
        out[:-1] = (prices[1:] - prices[:-1]) / dt[:, None]
        out[-1] = (prices[-1] - prices[-2]) / dt[-1]
        return out

    h1 = dt[:-1][:, None]
    h2 = dt[1:][:, None]
    out[1:-1] = (-h2 / (h1 * (h1 + h2)) * prices[:-2]
                 + (h2 - h1) / (h1 * h2) * prices[1:-1]
                 + h1 / (h2 * (h1 + h2)) * prices[2:])

    a, b = dt[0], dt[1]
    out[0] = (-(2 * a + b) / (a * (a + b)) * prices[0]
              + (a + b) / (a * b) * prices[1]
              - a / (b * (a + b)) * prices[2])
    a, b = dt[-2], dt[-1]
    out[-1] = (b / (a * (a + b)) * prices[-3]
               - (a + b) / (a * b) * prices[-2]
               + (a + 2 * b) / (b * (a + b)) * prices[-1])
    return out


def time_value_rate(s: CallSurface, cfg: DupireConfig) -> np.ndarray:
    """
    非负 C_t (Nonnegative time derivative used by calibration)

    The surface must be nondecreasing in time at every interior strike: a
    row-to-row price drop larger than cfg.ct_tol raises ValidationError
    with the offending nodes. Central interior rows are convex mixes of the
    neighbouring differences and stay nonnegative on such data; the
    one-sided end rows can undershoot where C_t is tiny, and there the
    first-order difference into the grid replaces the stencil value.
    """
    prices, times = s.prices, s.times
    if times.size > 1:
        drops = np.diff(prices, axis=0)[:, 1:-1]
        bad = np.argwhere(drops < -cfg.ct_tol)
        if bad.size:
            violations = [{"i": int(i + 1), "j": int(j + 1), "amount": float(drops[i, j])} for i, j in bad]
            raise ValidationError(f"call prices decrease in time at {len(violations)} interior nodes "
                                  f"(not a peacock surface)", violations=violations)

    ct = time_derivative(prices, times, cfg.time_stencil)
    if times.size > 2:
        dt = np.diff(times)
        first = (prices[1] - prices[0]) / dt[0]
        last = (prices[-1] - prices[-2]) / dt[-1]
        low_first = ct[0] < 0
        low_last = ct[-1] < 0
        ct[0] = np.where(low_first, first, ct[0])
        ct[-1] = np.where(low_last, last, ct[-1])
        fallback = int(low_first[1:-1].sum() + low_last[1:-1].sum())
        if fallback:
            logger.debug(f"{fallback} end-row C_t nodes use the first-order difference")
    return np.clip(ct, 0.0, None)


def strike_convexity(prices: np.ndarray, strikes: np.ndarray) -> np.ndarray:
    """C_xx on the full grid; edge columns copy their neighbours"""
    cxx = np.empty_like(prices)
    cxx[:, 1:-1] = strike_second_derivative(prices, strikes)
    cxx[:, 0] = cxx[:, 1]
    cxx[:, -1] = cxx[:, -2]
    return cxx


# ------------------------------ Scales ------------------------------------ #

def price_scale(s: CallSurface) -> float:
    """Largest time value on the last row, 1.0 for a surface without time value"""
    intrinsic = np.maximum(implied_forward(s) - s.strikes, 0.0)
    scale = float(np.max(s.prices[-1] - intrinsic))
    return scale if scale > 0 else 1.0


def implied_scale(s: CallSurface) -> float:
    """
    全局波动率尺度 (Global implied volatility scale)

    sqrt of the variance growth per unit time, with variances read from the
    call integrals Var = 2 * integral of (C - intrinsic) dk. Relative to the
    forward in the multiplicative convention.
    """
    if s.times.size < 2:
        return 1.0
    forward = implied_forward(s)
    intrinsic = np.maximum(forward - s.strikes, 0.0)
    variance = 2.0 * trapezoid(s.prices - intrinsic[None, :], s.strikes, axis=1)
    growth = (variance[-1] - variance[0]) / (s.times[-1] - s.times[0])
    if not np.isfinite(growth) or growth <= 0:
        return 1.0
    scale = np.sqrt(growth)
    if s.convention == MULTIPLICATIVE:
        scale /= forward
    return float(scale)


# ------------------------------ Calibration ------------------------------- #

def _calibrate(s: CallSurface, cfg: DupireConfig, multiplicative: bool) -> LocalVolSurface:
    if s.strikes.size < 3:
        raise ValidationError("at least three strikes are needed")
    if multiplicative and np.any(s.strikes <= 0):
        raise ValidationError("multiplicative calibration requires positive strikes",
                              witness=float(s.strikes[s.strikes <= 0][0]))

    ct = time_value_rate(s, cfg)
    cxx = strike_convexity(s.prices, s.strikes)

    cells = np.diff(s.strikes)
    floor = cfg.cxx_floor
    if floor is None:
        floor = 1e-8 * price_scale(s) / float(np.median(cells)) ** 2
    sigma_max = cfg.sigma_max if cfg.sigma_max is not None else 10.0 * implied_scale(s)

    clamps: List[ClampRecord] = []
    floored = cxx < floor
    for i, j in np.argwhere(floored[:, 1:-1]):
        clamps.append(ClampRecord(int(i), int(j + 1), "cxx_floor"))
    cxx = np.where(floored, floor, cxx)

    denom = cxx * (s.strikes[None, :] ** 2 if multiplicative else 1.0)
    sigma = np.sqrt(2.0 * ct / denom)
    sigma[:, 0] = sigma[:, 1]
    sigma[:, -1] = sigma[:, -2]

    for i, j in np.argwhere(sigma[:, 1:-1] > sigma_max):
        clamps.append(ClampRecord(int(i), int(j + 1), "sigma_max"))
    for i, j in np.argwhere(sigma[:, 1:-1] < cfg.sigma_min):
        clamps.append(ClampRecord(int(i), int(j + 1), "sigma_min"))
    sigma = np.clip(sigma, cfg.sigma_min, sigma_max)

    convention = MULTIPLICATIVE if multiplicative else ADDITIVE
    if clamps:
        logger.warning(f"{len(clamps)} local-vol nodes clamped "
                       f"(floor {floor:.3e}, sigma_max {sigma_max:.3e})")
    logger.info(f"Calibrated {convention} local vol on {s.times.size}x{s.strikes.size} grid")
    return LocalVolSurface(s.times, s.strikes, sigma, convention, tuple(clamps),
                           cfg.sigma_min, sigma_max)


def local_vol_additive(s: CallSurface, cfg: Optional[DupireConfig] = None) -> LocalVolSurface:
    """sigma^2 = 2 C_t / C_xx nodewise, floors and clamps reported"""
    if s.convention != ADDITIVE:
        raise ValidationError(f"surface convention is {s.convention}, expected additive")
    return _calibrate(s, cfg or DupireConfig(), multiplicative=False)


def local_vol_multiplicative(s: CallSurface, cfg: Optional[DupireConfig] = None) -> LocalVolSurface:
    """sigma^2 = 2 C_t / (x^2 C_xx) nodewise, relative volatility"""
    if s.convention != MULTIPLICATIVE:
        raise ValidationError(f"surface convention is {s.convention}, expected multiplicative")
    return _calibrate(s, cfg or DupireConfig(), multiplicative=True)


def calibrate(s: CallSurface, cfg: Optional[DupireConfig] = None) -> LocalVolSurface:
    """Dispatch on the surface convention"""
    if s.convention == MULTIPLICATIVE:
        return local_vol_multiplicative(s, cfg)
    return local_vol_additive(s, cfg)


def constant_local_vol(sigma: float, times, strikes, convention: str = ADDITIVE) -> LocalVolSurface:
    """Flat surface sigma(t, x) = sigma"""
    if convention not in CONVENTIONS:
        raise ValidationError(f"unknown convention {convention!r}")
    times = np.asarray(times, dtype=np.float64)
    strikes = np.asarray(strikes, dtype=np.float64)
    return LocalVolSurface(times, strikes, np.full((times.size, strikes.size), float(sigma)),
                           convention, (), 0.0, max(float(sigma), 0.0))


# ------------------------------ Diagnostics ------------------------------- #

@dataclass(frozen=True, eq=False)
class DiffusionResidual:
    residual: np.ndarray
    max_abs: float
    l2: float

    def to_dict(self):
        return {"max_abs": self.max_abs, "l2": self.l2}


def implied_diffusion_check(s: CallSurface, lv: LocalVolSurface,
                            cfg: Optional[DupireConfig] = None) -> DiffusionResidual:
    """
    Forward-equation residual C_t - (sigma^2 / 2) (x^2) C_xx over interior strikes

    The l2 figure is the root mean square over the interior nodes.
    """
    if lv.sigma.shape != s.prices.shape:
        raise ValidationError("local vol and surface grids differ")
    cfg = cfg or DupireConfig()
    ct = time_value_rate(s, cfg)[:, 1:-1]
    cxx = strike_second_derivative(s.prices, s.strikes)
    sigma = lv.sigma[:, 1:-1]
    factor = s.strikes[1:-1] ** 2 if lv.convention == MULTIPLICATIVE else 1.0
    residual = ct - 0.5 * sigma ** 2 * factor * cxx
    if residual.size == 0:
        return DiffusionResidual(residual, 0.0, 0.0)
    return DiffusionResidual(residual, float(np.max(np.abs(residual))),
                             float(np.sqrt(np.mean(residual ** 2))))

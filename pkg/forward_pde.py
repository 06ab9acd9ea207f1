"""
前向方程模块 (Forward Fokker-Planck Solver)

Conservative finite differences for dp/dt = d2/dx2 (sigma^2 / 2 * p) on a
nonuniform grid with zero-flux ends. The unknowns are cell masses m_i and
the semi-discrete operator

    dm_i/dt = g_{i+1/2} (q_{i+1} m_{i+1} - q_i m_i) - g_{i-1/2} (q_i m_i - q_{i-1} m_{i-1})

with q = D / cell width, D = sigma^2 / 2 (times x^2 when multiplicative)
and g = 1 / dx. Every column of the operator sums to zero, so total mass is
conserved to rounding; the mean drifts only through the boundary values D p.

主要功能：
1. evolve - Crank-Nicolson (default), explicit (CFL-checked) or implicit Euler
2. transition_kernel - the whole discrete transition matrix at once
3. roundtrip - calibrate, evolve and reprice a call surface
"""
import logging
from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import solve_banded

import dupire
from call_surface import extract_density
from core.exceptions import CflError, NumericalError, ValidationError
from core.io_schema import (MULTIPLICATIVE, CallSurface, FpSolveConfig, GridMeasure,
                            LocalVolSurface, MartingaleKernel, PeacockFamily, trapezoid_cells)
from measures import call_function

logger = logging.getLogger(__name__)

CN_DEFAULT_SUBSTEPS = 2


# ------------------------------ Grid -------------------------------------- #

def _terminal_variance(p0: GridMeasure, lv: LocalVolSurface) -> float:
    """Variance of p0 plus the variance accumulated along the mean path"""
    mean = p0.mean
    var = float(p0.weights @ (p0.grid - mean) ** 2)
    sig = np.array([lv.sigma_at(t, mean) for t in lv.times])
    if lv.times.size > 1:
        var_growth = float(np.sum(0.5 * (sig[1:] ** 2 + sig[:-1] ** 2) * np.diff(lv.times)))
    else:
        var_growth = 0.0
    if lv.convention == MULTIPLICATIVE:
        var_growth *= mean ** 2
    return var + var_growth


def build_grid(p0: GridMeasure, lv: LocalVolSurface, cfg: FpSolveConfig) -> np.ndarray:
    """
    Local-vol strike grid padded to +-pad_std terminal deviations

    Padding continues the end spacing, arithmetically in the additive
    convention and geometrically in the multiplicative one.
    """
    if cfg.grid is not None:
        grid = np.asarray(cfg.grid, dtype=np.float64)
        if p0.grid[0] < grid[0] - 1e-12 or p0.grid[-1] > grid[-1] + 1e-12:
            raise ValidationError("p0 is not supported inside the solver grid",
                                  witness=[float(p0.grid[0]), float(p0.grid[-1])])
        return grid

    strikes = lv.strikes.copy()
    mean = p0.mean
    std = np.sqrt(max(_terminal_variance(p0, lv), 0.0))
    lo = min(mean - cfg.pad_std * std, p0.grid[0])
    hi = max(mean + cfg.pad_std * std, p0.grid[-1])

    left, right = [], []
    if lv.convention == MULTIPLICATIVE:
        lo = max(lo, strikes[0] * 1e-3)
        ratio_lo = lv.strikes[1] / lv.strikes[0]
        ratio_hi = lv.strikes[-1] / lv.strikes[-2]
        x = strikes[0]
        while x > lo:
            x /= ratio_lo
            left.append(x)
        x = strikes[-1]
        while x < hi:
            x *= ratio_hi
            right.append(x)
    else:
        step_lo = lv.strikes[1] - lv.strikes[0]
        step_hi = lv.strikes[-1] - lv.strikes[-2]
        x = strikes[0]
        while x > lo:
            x -= step_lo
            left.append(x)
        x = strikes[-1]
        while x < hi:
            x += step_hi
            right.append(x)
    grid = np.concatenate((left[::-1], strikes, right))
    logger.debug(f"Solver grid: {grid.size} nodes on [{grid[0]:.4g}, {grid[-1]:.4g}]")
    return grid


def project_onto_grid(m: GridMeasure, grid: np.ndarray) -> np.ndarray:
    """Split each atom linearly between its neighbouring nodes (mass and mean exact)"""
    out = np.zeros(grid.size)
    x = np.clip(m.grid, grid[0], grid[-1])
    right = np.clip(np.searchsorted(grid, x, side="left"), 0, grid.size - 1)
    exact = np.isclose(grid[right], x, rtol=0, atol=1e-12)
    np.add.at(out, right[exact], m.weights[exact])
    inner = ~exact
    if np.any(inner):
        r = right[inner]
        lft = r - 1
        theta = (x[inner] - grid[lft]) / (grid[r] - grid[lft])
        np.add.at(out, lft, m.weights[inner] * (1 - theta))
        np.add.at(out, r, m.weights[inner] * theta)
    return out


# ------------------------------ Operator ---------------------------------- #

class ForwardOperator:
    """Tridiagonal conservative operator A(t) on a fixed grid"""

    def __init__(self, lv: LocalVolSurface, grid: np.ndarray):
        self.lv = lv
        self.grid = grid
        self.cells = trapezoid_cells(grid)
        inv_dx = 1.0 / np.diff(grid)
        self.g_up = np.concatenate((inv_dx, [0.0]))
        self.g_down = np.concatenate(([0.0], inv_dx))
        self.multiplier = grid ** 2 if lv.convention == MULTIPLICATIVE else np.ones_like(grid)

    def q(self, t: float) -> np.ndarray:
        sigma = self.lv.sigma_at(t, self.grid)
        return 0.5 * sigma ** 2 * self.multiplier / self.cells

    def diagonals(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(upper, main, lower) with upper[i] = A[i, i+1], lower[i] = A[i+1, i]"""
        q = self.q(t)
        upper = self.g_up[:-1] * q[1:]
        lower = self.g_down[1:] * q[:-1]
        main = -(self.g_up + self.g_down) * q
        return upper, main, lower

    def apply(self, t: float, m: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """m + scale * A(t) m (m may hold several columns)"""
        upper, main, lower = self.diagonals(t)
        if m.ndim == 2:
            upper, main, lower = upper[:, None], main[:, None], lower[:, None]
        out = m + scale * main * m
        out[:-1] += scale * upper * m[1:]
        out[1:] += scale * lower * m[:-1]
        return out

    def solve(self, t: float, rhs: np.ndarray, scale: float) -> np.ndarray:
        """Solve (I - scale * A(t)) m = rhs"""
        upper, main, lower = self.diagonals(t)
        ab = np.zeros((3, self.grid.size))
        ab[0, 1:] = -scale * upper
        ab[1] = 1.0 - scale * main
        ab[2, :-1] = -scale * lower
        return solve_banded((1, 1), ab, rhs)

    def cfl_number(self, t: float, dt: float) -> float:
        """max dt * (g+ + g-) * q, equal to sigma^2 dt / dx^2 on a uniform grid"""
        return float(np.max(dt * (self.g_up + self.g_down) * self.q(t)))


def _step(op: ForwardOperator, scheme: str, t: float, dt: float, m: np.ndarray) -> np.ndarray:
    if scheme == "explicit":
        return op.apply(t, m, dt)
    if scheme == "implicit":
        return op.solve(t + dt, m, dt)
    return op.solve(t + dt, op.apply(t, m, 0.5 * dt), 0.5 * dt)


def _substeps(op: ForwardOperator, cfg: FpSolveConfig, t0: float, t1: float) -> int:
    dt = t1 - t0
    if cfg.scheme != "explicit":
        return cfg.substeps or CN_DEFAULT_SUBSTEPS
    cfl = max(op.cfl_number(t0, dt), op.cfl_number(t1, dt))
    if cfg.substeps is None:
        return max(1, int(np.ceil(cfl / cfg.cfl_limit)))
    if cfl / cfg.substeps > cfg.cfl_limit:
        raise CflError(f"explicit scheme unstable: CFL {cfl / cfg.substeps:.3f} > {cfg.cfl_limit}",
                       {"cfl": cfl / cfg.substeps, "limit": cfg.cfl_limit, "interval": [t0, t1]})
    return cfg.substeps


# ------------------------------ Evolution --------------------------------- #

@dataclass(frozen=True)
class ConservationReport:
    max_mass_error: float
    max_mean_drift: float
    min_weight: float
    clipped_mass: float
    steps: int

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FpSolution:
    family: PeacockFamily
    conservation: ConservationReport


def evolve(p0: GridMeasure, lv: LocalVolSurface, cfg: Optional[FpSolveConfig] = None) -> FpSolution:
    """
    前向演化 (Evolve p0 from lv.times[0] through every local-vol time node)

    Args:
        p0: Initial law at lv.times[0]
        lv: Local volatility, interpolated onto the solver grid
        cfg: Scheme, grid and substep settings

    Returns:
        FpSolution: density family on the solver grid plus conservation report

    Raises:
        CflError: explicit scheme with a substep count above the CFL limit
        NumericalError: a weight below -negative_tol
    """
    cfg = cfg or FpSolveConfig()
    grid = build_grid(p0, lv, cfg)
    op = ForwardOperator(lv, grid)
    m = project_onto_grid(p0, grid)
    mean0 = float(m @ grid)

    mass_err = abs(m.sum() - 1.0)
    mean_drift = 0.0
    min_weight = float(m.min())
    clipped = 0.0
    steps = 0
    members = [GridMeasure(grid, m / m.sum(), f"p(t={lv.times[0]:g})")]

    for k in range(lv.times.size - 1):
        t0, t1 = float(lv.times[k]), float(lv.times[k + 1])
        n_sub = _substeps(op, cfg, t0, t1)
        dt = (t1 - t0) / n_sub
        for n in range(n_sub):
            t = t0 + n * dt
            m = _step(op, cfg.scheme, t, dt, m)
            steps += 1
            low = float(m.min())
            if low < -cfg.negative_tol:
                raise NumericalError(f"negative density {low:.3e} at t={t + dt:.6g}",
                                     {"step": steps, "time": t + dt, "min_weight": low})
            min_weight = min(min_weight, low)
            mass_err = max(mass_err, abs(m.sum() - 1.0))
            mean_drift = max(mean_drift, abs(m @ grid - mean0))
        clipped_m = np.clip(m, 0.0, None)
        clipped += float(clipped_m.sum() - m.sum())
        members.append(GridMeasure(grid, clipped_m / clipped_m.sum(), f"p(t={t1:g})"))

    report = ConservationReport(mass_err, mean_drift, min_weight, clipped, steps)
    logger.info(f"Forward solve ({cfg.scheme}): {steps} steps, mass error {mass_err:.2e}, "
                f"mean drift {mean_drift:.2e}")
    return FpSolution(PeacockFamily(lv.times, tuple(members), "forward_pde"), report)


def transition_kernel(lv: LocalVolSurface, cfg: Optional[FpSolveConfig] = None,
                      s_index: int = 0, t_index: int = -1) -> MartingaleKernel:
    """
    转移核 (Discrete transition law between two local-vol times)

    Every unit mass on the grid is evolved at once as a column of the
    identity, using implicit Euler so that the matrix stays nonnegative.
    """
    cfg = cfg or FpSolveConfig()
    grid = np.asarray(cfg.grid, dtype=np.float64) if cfg.grid is not None else lv.strikes.copy()
    times = lv.times
    t_index = t_index % times.size
    if not 0 <= s_index < t_index:
        raise ValidationError("transition kernel needs s_index < t_index",
                              witness=[s_index, t_index])
    op = ForwardOperator(lv, grid)
    m = np.eye(grid.size)
    n_sub = cfg.substeps or CN_DEFAULT_SUBSTEPS
    for k in range(s_index, t_index):
        t0, t1 = float(times[k]), float(times[k + 1])
        dt = (t1 - t0) / n_sub
        for n in range(n_sub):
            m = op.solve(t0 + (n + 1) * dt, m, dt)
    rows = np.clip(m.T, 0.0, None)
    rows /= rows.sum(axis=1, keepdims=True)
    return MartingaleKernel(grid, grid, rows)


# ------------------------------ Round trip -------------------------------- #

@dataclass(frozen=True, eq=False)
class RoundTripReport:
    reprice_error_max_rel: float
    reprice_error_l2: float
    family: PeacockFamily
    local_vol: LocalVolSurface
    repriced: np.ndarray
    mask: np.ndarray
    conservation: ConservationReport

    def to_dict(self):
        return {
            "reprice_error_max_rel": self.reprice_error_max_rel,
            "reprice_error_l2": self.reprice_error_l2,
            "nodes_compared": int(self.mask.sum()),
            "clamped_nodes": len(self.local_vol.clamp_report),
            "conservation": self.conservation.to_dict(),
        }


def roundtrip(surface: CallSurface, cfg: Optional[FpSolveConfig] = None,
              dupire_cfg: Optional[dupire.DupireConfig] = None) -> RoundTripReport:
    """
    校准-演化-重定价 (Calibrate, evolve and reprice)

    The initial law is the Breeden-Litzenberger density of the first row.
    Errors are relative, measured on interior nodes: later times, strikes
    at least interior_margin cells from either end, and prices above
    price_floor times the surface price scale.
    """
    cfg = cfg or FpSolveConfig()
    p0 = extract_density(surface, 0).measure
    lv = dupire.calibrate(surface, dupire_cfg)
    solution = evolve(p0, lv, cfg)
    repriced = np.vstack([call_function(m, surface.strikes) for m in solution.family.measures])

    margin = cfg.interior_margin
    mask = np.zeros(surface.prices.shape, dtype=bool)
    mask[1:, margin:surface.strikes.size - margin] = True
    mask &= surface.prices >= cfg.price_floor * dupire.price_scale(surface)

    if not mask.any():
        max_rel = l2 = float(np.max(np.abs(repriced - surface.prices)))
    else:
        rel = np.abs(repriced - surface.prices)[mask] / surface.prices[mask]
        max_rel = float(rel.max())
        l2 = float(np.sqrt(np.mean(rel ** 2)))
    logger.info(f"Round trip: max relative error {max_rel:.3e}, rms {l2:.3e} on {int(mask.sum())} nodes")
    return RoundTripReport(max_rel, l2, solution.family, lv, repriced, mask, solution.conservation)

"""
鞅最优传输模块 (Martingale Transport)

Discrete martingale couplings between measures in convex order solved as
linear programs, Lipschitz-kernel certification, kernel chains fitted to a
peacock on finitely many times, and the meet-and-glue coupling of two
diffusion copies.
"""
import logging
from dataclasses import dataclass, asdict, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.stats import norm

from core.base_process import BaseProcess
from core.exceptions import InfeasibleError, NumericalError, ValidationError
from core.io_schema import GridMeasure, MartingaleKernel, PathEnsemble, PeacockFamily, config_from_dict
from mc_engine import GENERATOR_ID, empirical_kernel, run_blocks
from measures import (check_convex_order, check_first_order_dominance, from_atoms, from_density,
                      quantile, verify_peacock, w1_distance)

logger = logging.getLogger(__name__)

OBJECTIVES = ("feasible_only", "min_abs", "max_abs", "min_sq")
Objective = Union[str, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class CouplingConfig:
    """LP settings: HiGHS dual simplex with tight feasibility tolerances"""
    objective: str = "feasible_only"
    mean_tol_rel: float = 1e-8
    lp_method: str = "highs-ds"
    lp_tolerance: float = 1e-10
    max_grid: int = 512

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CouplingConfig":
        return config_from_dict(cls, data)


# ------------------------------ Kernels ----------------------------------- #

def identity_kernel(grid) -> MartingaleKernel:
    grid = np.asarray(grid, dtype=np.float64)
    return MartingaleKernel(grid, grid, np.eye(grid.size))


def heat_kernel(source, target, variance: float) -> MartingaleKernel:
    """Rows N(x, variance) discretized on `target` (point masses at the nearest node for variance 0)"""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rows = np.zeros((source.size, target.size))
    if variance <= 0:
        nearest = np.abs(target[None, :] - source[:, None]).argmin(axis=1)
        rows[np.arange(source.size), nearest] = 1.0
    else:
        for i, x in enumerate(source):
            rows[i] = from_density(target, norm.pdf(target, loc=x, scale=np.sqrt(variance))).weights
    return MartingaleKernel(source, target, rows)


def push_forward(mu: GridMeasure, k: MartingaleKernel) -> GridMeasure:
    """Second marginal of the coupling mu(dx) k(x, dy)"""
    idx = np.searchsorted(k.source_grid, mu.grid)
    idx = np.clip(idx, 0, k.n_source - 1)
    if not np.allclose(k.source_grid[idx], mu.grid, rtol=0, atol=1e-12):
        bad = mu.grid[~np.isclose(k.source_grid[idx], mu.grid, rtol=0, atol=1e-12)][0]
        raise ValidationError("measure charges a point outside the kernel source grid", witness=float(bad))
    weights = mu.weights @ k.rows[idx]
    weights = np.clip(weights, 0.0, None)
    return GridMeasure(k.target_grid, weights / weights.sum())


# ------------------------------ LP coupling ------------------------------- #

def _cost_matrix(objective: Objective, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    X, Y = np.meshgrid(x, y, indexing="ij")
    if callable(objective):
        return np.asarray(objective(X, Y), dtype=np.float64)
    if objective == "feasible_only":
        return np.zeros_like(X)
    if objective == "min_abs":
        return np.abs(Y - X)
    if objective == "max_abs":
        return -np.abs(Y - X)
    if objective == "min_sq":
        return (Y - X) ** 2
    raise ValidationError(f"unknown objective {objective!r}")


def solve_martingale_coupling(mu: GridMeasure, nu: GridMeasure, objective: Objective = "feasible_only",
                              cfg: Optional[CouplingConfig] = None) -> MartingaleKernel:
    """
    鞅耦合求解 (Martingale coupling by linear programming)

    Variables gamma[i, j] >= 0 with row sums mu, column sums nu and
    sum_j gamma[i, j] (y_j - x_i) = 0. Source points without mass are dropped.

    Raises:
        ValidationError: means differ or the grids are too large
        InfeasibleError: no martingale coupling (certificate holds the convex-order witness)
        NumericalError: any other solver failure
    """
    cfg = cfg or CouplingConfig()
    if abs(mu.mean - nu.mean) > cfg.mean_tol_rel * (1 + abs(mu.mean)):
        raise ValidationError(f"means differ: {mu.mean:.12g} vs {nu.mean:.12g}",
                              witness={"mean_mu": mu.mean, "mean_nu": nu.mean})
    keep = mu.weights > 0
    x, p = mu.grid[keep], mu.weights[keep]
    y, q = nu.grid, nu.weights
    n, m = x.size, y.size
    if max(n, m) > cfg.max_grid:
        raise ValidationError(f"grids above {cfg.max_grid} points are out of scope for the dense LP",
                              witness=[int(n), int(m)])

    ones_m = sparse.csr_matrix(np.ones((1, m)))
    a_rows = sparse.kron(sparse.identity(n), ones_m)
    a_cols = sparse.kron(sparse.csr_matrix(np.ones((1, n))), sparse.identity(m))
    a_mean = sparse.kron(sparse.identity(n), sparse.csr_matrix(y[None, :])) \
        - sparse.kron(sparse.diags(x), ones_m)
    a_eq = sparse.vstack([a_rows, a_cols, a_mean]).tocsr()
    b_eq = np.concatenate((p, q, np.zeros(n)))
    cost = _cost_matrix(objective, x, y).ravel()

    options = {"primal_feasibility_tolerance": cfg.lp_tolerance,
               "dual_feasibility_tolerance": cfg.lp_tolerance}
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method=cfg.lp_method, options=options)
    if res.status == 2:
        verdict = check_convex_order(mu, nu)
        certificate = {"convex_order": verdict.to_dict(), "lp_status": int(res.status),
                       "lp_message": str(res.message)}
        logger.info(f"Martingale LP infeasible ({n}x{m}); convex-order witness {verdict.witness}")
        raise InfeasibleError("no martingale coupling exists between the given measures", certificate)
    if res.status != 0:
        raise NumericalError(f"LP solver failed: {res.message}", {"lp_status": int(res.status)})

    gamma = np.clip(res.x.reshape(n, m), 0.0, None)
    rows = gamma / gamma.sum(axis=1, keepdims=True)
    name = objective if isinstance(objective, str) else "callable"
    logger.info(f"Martingale coupling solved ({n}x{m}, objective {name}, value {res.fun:.6g})")
    return MartingaleKernel(x, y, rows, p)


# ------------------------------ Lipschitz certification ------------------- #

def _row_w1(cdfs: np.ndarray, gaps: np.ndarray, i: int, others: np.ndarray) -> np.ndarray:
    return np.abs(cdfs[others, :-1] - cdfs[i, :-1]) @ gaps


def _pairs_w1(k: MartingaleKernel, rows: np.ndarray, all_pairs: bool):
    """(i, j, W1, |x_i - x_j|) for the chosen row pairs"""
    cdfs = k.row_cdfs()
    gaps = np.diff(k.target_grid)
    out = []
    if gaps.size == 0:
        return out
    for a, i in enumerate(rows):
        others = rows[a + 1:] if all_pairs else rows[a + 1:a + 2]
        if others.size == 0:
            continue
        w1 = _row_w1(cdfs, gaps, i, others)
        dist = np.abs(k.source_grid[others] - k.source_grid[i])
        out.extend(zip([int(i)] * others.size, others.tolist(), w1.tolist(), dist.tolist()))
    return out


@dataclass
class LipschitzReport:
    passed: bool
    max_violation: float
    worst_pair: Optional[List[int]]
    worst_sources: Optional[List[float]]
    pairs_checked: int
    all_pairs: bool
    details: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def lipschitz_kernel_check(k: MartingaleKernel, tol: float = 1e-9, all_pairs_limit: int = 512,
                           max_details: int = 20) -> LipschitzReport:
    """
    Lipschitz 核检验 (W1(pi_x, pi_y) <= |x - y|)

    All pairs are checked when the kernel has at most all_pairs_limit
    populated rows, adjacent pairs otherwise. Sparse rows are skipped.
    """
    rows = np.array([i for i in range(k.n_source) if i not in set(k.sparse_rows)], dtype=np.int64)
    all_pairs = rows.size <= all_pairs_limit
    pairs = _pairs_w1(k, rows, all_pairs)
    if not pairs:
        return LipschitzReport(True, 0.0, None, None, 0, all_pairs)
    excess = np.array([w1 - dist for _, _, w1, dist in pairs])
    worst = int(np.argmax(excess))
    i, j = pairs[worst][0], pairs[worst][1]
    order = np.argsort(-excess)[:max_details]
    details = [{"i": pairs[o][0], "j": pairs[o][1], "w1": pairs[o][2], "distance": pairs[o][3],
                "excess": float(excess[o])} for o in order if excess[o] > tol]
    max_violation = float(max(excess[worst], 0.0))
    passed = max_violation <= tol
    if not passed:
        logger.info(f"Lipschitz check fails: W1 exceeds |x-y| by {max_violation:.4f} "
                    f"between x={k.source_grid[i]:.4g} and y={k.source_grid[j]:.4g}")
    return LipschitzReport(passed, max_violation, [i, j],
                           [float(k.source_grid[i]), float(k.source_grid[j])],
                           len(pairs), all_pairs, details)


@dataclass
class DominanceReport:
    lipschitz: bool
    w1_equals_distance: bool
    adjacent_dominance: bool
    max_lipschitz_violation: float
    max_w1_gap: float
    max_dominance_excess: float

    @property
    def consistent(self) -> bool:
        return self.lipschitz == self.w1_equals_distance == self.adjacent_dominance

    def to_dict(self):
        data = asdict(self)
        data["consistent"] = self.consistent
        return data


def dominance_equivalence_check(k: MartingaleKernel, tol: float = 1e-9) -> DominanceReport:
    """
    Evaluate the three equivalent descriptions of a monotone martingale kernel

    (a) Lipschitz, (b) W1(pi_x, pi_y) = |x - y|, (c) pi_y dominates pi_x in
    first order for adjacent x < y.
    """
    if np.any(np.abs(k.martingale_defect()) > 1e-6 * (1 + np.abs(k.source_grid))):
        logger.warning("Kernel is not a martingale kernel; the equivalence need not hold")
    lip = lipschitz_kernel_check(k, tol)
    rows = np.array([i for i in range(k.n_source) if i not in set(k.sparse_rows)], dtype=np.int64)
    pairs = _pairs_w1(k, rows, rows.size <= 512)
    w1_gap = max((abs(w1 - dist) for _, _, w1, dist in pairs), default=0.0)
    cdfs = k.row_cdfs()
    dominance = 0.0
    for lower, upper in zip(rows[:-1], rows[1:]):
        dominance = max(dominance, float(np.max(cdfs[upper] - cdfs[lower])))
    return DominanceReport(lip.passed, w1_gap <= tol, dominance <= tol,
                           lip.max_violation, float(w1_gap), dominance)


# ------------------------------ Chains ------------------------------------ #

def nearest_index(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of the grid node closest to each value"""
    right = np.clip(np.searchsorted(grid, values), 1, max(grid.size - 1, 1))
    if grid.size == 1:
        return np.zeros(values.shape, dtype=np.int64)
    left = right - 1
    return np.where(np.abs(values - grid[left]) <= np.abs(grid[right] - values), left, right)


@dataclass
class KernelChain:
    """Kernels between consecutive family times with a sampling hook"""
    times: np.ndarray
    kernels: List[MartingaleKernel]
    initial: GridMeasure

    def marginals(self) -> List[GridMeasure]:
        out = [self.initial]
        for k in self.kernels:
            out.append(push_forward(out[-1], k))
        return out

    def sample(self, n_paths: int, seed: int = 0, max_workers: Optional[int] = None) -> PathEnsemble:
        """Discrete-time Markov martingale paths through the chain"""
        cdfs = [np.cumsum(k.rows, axis=1) for k in self.kernels]

        def _block(gen, size):
            out = np.empty((size, len(self.kernels) + 1))
            state = np.asarray(quantile(self.initial, gen.random(size)), dtype=np.float64)
            out[:, 0] = state
            for n, k in enumerate(self.kernels):
                u = gen.random(size)
                src = nearest_index(k.source_grid, state)
                nxt = np.empty(size)
                for i in np.unique(src):
                    members = np.flatnonzero(src == i)
                    j = np.minimum(np.searchsorted(cdfs[n][i], u[members], side="right"), k.target_grid.size - 1)
                    nxt[members] = k.target_grid[j]
                state = nxt
                out[:, n + 1] = state
            return out

        paths = run_blocks(n_paths, seed, _block, max_workers)
        return PathEnsemble(self.times, paths, seed, GENERATOR_ID, {"kind": "kernel_chain"})


def chain_kernels(fam: PeacockFamily, objective: Objective = "feasible_only",
                  cfg: Optional[CouplingConfig] = None) -> KernelChain:
    """
    核链 (One martingale kernel per consecutive pair of the family)

    Raises:
        ValidationError: the family is not a peacock
        InfeasibleError: a pair admits no coupling; the interval is in the certificate
    """
    verdict = verify_peacock(fam)
    if not verdict.holds:
        raise ValidationError(f"family is not a peacock: {verdict.reason}",
                              witness={"times": verdict.times, "strike": verdict.witness})
    kernels = []
    for i in range(len(fam) - 1):
        try:
            kernels.append(solve_martingale_coupling(fam.measures[i], fam.measures[i + 1], objective, cfg))
        except InfeasibleError as e:
            e.certificate["interval"] = [float(fam.times[i]), float(fam.times[i + 1])]
            raise
    logger.info(f"Chained {len(kernels)} martingale kernels over {len(fam)} times")
    return KernelChain(fam.times, kernels, fam.measures[0])


# ------------------------------ Meet coupling ----------------------------- #

@dataclass
class MeetReport:
    violations: int
    unglued_crossings: int
    meet_fraction: float
    mean_meeting_time: Optional[float]
    min_gap: float
    terminal_dominance: Dict[str, Any]
    glued_terminal_w1: float

    def to_dict(self):
        return asdict(self)


def meet_coupling_sim(process: BaseProcess, x: float, y: float, s: float, t: float, n_paths: int,
                      seed: int = 0, steps: int = 200, max_workers: Optional[int] = None) -> MeetReport:
    """
    相遇耦合 (Glue the lower copy to the upper one at their first meeting)

    Independent copies start from x <= y at time s and are recorded on the
    whole grid. The lower copy is then replaced by the upper one from the
    first grid time where Y - X <= 0, and the glued path is checked against
    the upper one at every grid time. violations counts the grid nodes where
    the glued copy sits above the upper copy; unglued_crossings counts the
    paths whose free lower copy ends above the upper one. The meeting time
    is located by linear interpolation of the sign change.
    """
    if x > y:
        raise ValidationError("meet coupling needs x <= y", witness=[x, y])
    if not s < t:
        raise ValidationError("meet coupling needs s < t", witness=[s, t])
    grid = np.linspace(s, t, steps + 1)
    dt = (t - s) / steps

    def _block(gen, size):
        lower = np.empty((size, steps + 1))
        upper = np.empty((size, steps + 1))
        lower[:, 0] = x
        upper[:, 0] = y
        for n in range(steps):
            z1 = gen.standard_normal(size)
            z2 = gen.standard_normal(size)
            lower[:, n + 1] = process.euler_step(grid[n], lower[:, n], dt, z1)
            upper[:, n + 1] = process.euler_step(grid[n], upper[:, n], dt, z2)

        gaps = upper - lower
        touched = gaps <= 0
        met = touched.any(axis=1)
        first = np.where(met, np.argmax(touched, axis=1), steps + 1)
        glued = np.where(np.arange(steps + 1)[None, :] >= first[:, None], upper, lower)
        bad = np.sum(glued > upper + 1e-12, axis=1)

        k = np.clip(first, 1, steps)
        rows = np.arange(size)
        prev_gap, gap = gaps[rows, k - 1], gaps[rows, k]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.clip(prev_gap / (prev_gap - gap), 0.0, 1.0)
        meet_time = np.where(first == 0, s, np.where(met, grid[k - 1] + dt * frac, np.nan))
        gap_min = np.min(upper - glued, axis=1)
        crossed = lower[:, -1] > upper[:, -1]
        return np.column_stack((glued[:, -1], upper[:, -1], lower[:, -1], meet_time, gap_min, bad, crossed))

    res = run_blocks(n_paths, seed, _block, max_workers)
    glued, upper, free, meet_time, gap_min, bad, crossed = res.T
    met = np.isfinite(meet_time)
    dominance = check_first_order_dominance(from_atoms(glued), from_atoms(upper))
    report = MeetReport(int(bad.sum()), int(crossed.sum()), float(met.mean()),
                        float(meet_time[met].mean()) if met.any() else None,
                        float(gap_min.min()), dominance.to_dict(),
                        w1_distance(from_atoms(glued), from_atoms(free)))
    logger.info(f"Meet coupling x={x:g}, y={y:g}: {report.meet_fraction:.3f} met, "
                f"{report.violations} pathwise violations, {report.unglued_crossings} unglued crossings")
    return report


# ------------------------------ Scaling diagnostic ------------------------ #

@dataclass
class ScalingReport:
    horizons: List[float]
    first_moments: List[float]
    exponent: float
    intercept: float

    def to_dict(self):
        return asdict(self)


def transition_first_moment_scaling(ens: PathEnsemble, t0: float, horizons: Sequence[float],
                                    bins=20, min_count: int = 50) -> ScalingReport:
    """
    m1(pi^{t0, t0+h}) = sum_x w_x E|Y - x| per horizon and its log-log slope

    The exponent is reported, not asserted.
    """
    m1 = []
    for h in horizons:
        k = empirical_kernel(ens, t0, t0 + h, bins, min_count)
        spread = np.abs(k.target_grid[None, :] - k.source_grid[:, None])
        m1.append(float(k.source_weights @ np.sum(k.rows * spread, axis=1)))
    if len(horizons) >= 2 and min(m1) > 0:
        exponent, intercept = np.polyfit(np.log(horizons), np.log(m1), 1)
    else:
        exponent, intercept = float("nan"), float("nan")
    return ScalingReport(list(map(float, horizons)), m1, float(exponent), float(intercept))

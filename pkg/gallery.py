"""
示例过程库 (Gallery of Markov Martingales)

Continuous Markov martingales built from geometric Brownian motion
S = exp(W_t - t/2):

1. easy      - GBM from 1 stopped at 2 on [0, 1/2], then frozen at 2 if
               stopped, free GBM otherwise (Markov, not strong Markov)
2. cantor    - free GBM on [0, 1/3], stopped at a truncated Cantor set K
               in [1, 2] on [1/3, 2/3], then frozen or free on [2/3, 1]
3. excursion - same first phase as easy; afterwards the atom at 2 emits
               excursions while diffusing paths are absorbed at 2, with the
               emission count solved every step so the atom mass stays put
4. brownian  - 1 + W, the strong Markov control

plus the statistics that tell them apart: joint-law distinguisher, kernel
monotonicity test and regularity-preservation test.

Barrier hits between grid times are detected with the Brownian-bridge
crossing probability exp(-2 (a - y0)(a - y1) / dt) in log space.
"""
import logging
from dataclasses import dataclass, asdict, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np
from scipy.stats import norm

from core.exceptions import NumericalError, ValidationError
from core.io_schema import GalleryProcessSpec, HittingRule, PathEnsemble
from mc_engine import (GENERATOR_ID, BrownianProcess, Estimate, empirical_kernel, empirical_marginal,
                       mean_estimate, proportion_estimate, run_blocks, simulate_process)
from measures import w1_distance

logger = logging.getLogger(__name__)

ATOM_LEVEL = 2.0
LOG_LEVEL = float(np.log(ATOM_LEVEL))


# ------------------------------ Helpers ----------------------------------- #

def _record_grid(steps: int, record_every: int) -> np.ndarray:
    if steps % record_every:
        raise ValidationError("steps must be a multiple of record_every")
    return np.linspace(0.0, 1.0, steps // record_every + 1)


def _phase_step(boundary: float, steps: int, record_every: int) -> int:
    k = boundary * steps
    if abs(k - round(k)) > 1e-9 or round(k) % record_every:
        raise ValidationError(f"phase boundary {boundary:.4f} is not a recorded grid time",
                              witness=boundary)
    return int(round(k))


def _bridge_hit(y0: np.ndarray, y1: np.ndarray, level: float, dt: float, u: np.ndarray) -> np.ndarray:
    """Crossed between grid times: endpoints on opposite sides, or the bridge touched the level"""
    crossed = (y0 - level) * (y1 - level) <= 0
    prob = np.exp(-2.0 * np.clip((level - y0) * (level - y1), 0.0, None) / dt)
    return crossed | (u < prob)


def easy_stop_probability(level: float = ATOM_LEVEL, horizon: float = 0.5) -> float:
    """
    P(sup_{u<=horizon} (W_u - u/2) >= ln level)

    Closed-form hitting law of Brownian motion with drift -1/2.
    """
    a = np.log(level)
    mu = -0.5
    root = np.sqrt(horizon)
    return float(norm.sf((a - mu * horizon) / root)
                 + np.exp(2 * mu * a) * norm.cdf((-a - mu * horizon) / root))


def cantor_left_endpoints(depth: int, origin: float = 1.0) -> np.ndarray:
    """Left ends of the 2^depth intervals of width 3^-depth making up K"""
    lefts = np.zeros(1)
    for n in range(1, depth + 1):
        lefts = np.concatenate((lefts, lefts + 2.0 * 3.0 ** -n))
    return origin + np.sort(lefts)


# ------------------------------ Builders ---------------------------------- #

def _stopped_gbm_block(gen, size, steps, record_every, stop_step, freeze_from, excursion=None):
    """
    One block of the easy / excursion constructions

    Paths hitting 2 before stop_step are stopped there. From freeze_from on,
    stopped paths either stay frozen (easy) or follow the excursion chain.
    """
    dt = 1.0 / steps
    root_dt = np.sqrt(dt)
    y = np.zeros(size)
    at_atom = np.zeros(size, dtype=bool)
    out = np.empty((size, steps // record_every + 1))
    out[:, 0] = 1.0
    target_count = None

    for k in range(steps):
        z = gen.standard_normal(size)
        u = gen.random(size)
        if excursion is not None:
            u_leave = gen.random(size)
            u_side = gen.random(size)
        free = ~at_atom
        y_new = y + (-0.5 * dt + root_dt * z)

        if k < stop_step:
            hit = free & _bridge_hit(y, y_new, LOG_LEVEL, dt, u)
            y = np.where(free, y_new, y)
            at_atom |= hit
        elif excursion is None:
            y = np.where(free, y_new, y)
        else:
            if target_count is None:
                target_count = excursion(k * dt, int(at_atom.sum()), size)
            hit = free & _bridge_hit(y, y_new, LOG_LEVEL, dt, u)
            y = np.where(free, y_new, y)
            at_atom |= hit
            target = excursion((k + 1) * dt, target_count, size)
            leavers = int(at_atom.sum()) - target
            if leavers < 0:
                raise NumericalError(f"excursion balance infeasible at step {k}: atom below target",
                                     {"step": k, "atom": int(at_atom.sum()), "target": target})
            if leavers:
                members = np.flatnonzero(at_atom)
                leaving = members[np.argsort(u_leave[members], kind="stable")[:leavers]]
                # up to 2 e^{+sqrt(dt)}, down to 2 e^{-sqrt(dt)}, mean 2
                up = np.exp(root_dt)
                down = np.exp(-root_dt)
                p_up = (1.0 - down) / (up - down)
                step_sign = np.where(u_side[leaving] < p_up, root_dt, -root_dt)
                y[leaving] = LOG_LEVEL + step_sign
                at_atom[leaving] = False
        y = np.where(at_atom, LOG_LEVEL, y)

        if (k + 1) % record_every == 0:
            out[:, (k + 1) // record_every] = np.where(at_atom, ATOM_LEVEL, np.exp(y))
    return out


def build_easy(n_paths: int = 100_000, steps: int = 400, seed: int = 0, record_every: int = 20,
               max_workers: Optional[int] = None) -> PathEnsemble:
    """
    停止的几何布朗运动 (GBM stopped at 2 on [0, 1/2], frozen afterwards)

    Args:
        n_paths: Number of paths
        steps: Fine steps on [0, 1]; 1/2 must be a recorded time
        seed: Stream seed
        record_every: Fine steps between recorded times
    """
    times = _record_grid(steps, record_every)
    half = _phase_step(0.5, steps, record_every)
    paths = run_blocks(n_paths, seed,
                       lambda gen, size: _stopped_gbm_block(gen, size, steps, record_every, half, half),
                       max_workers)
    atom = float(np.mean(paths[:, -1] == ATOM_LEVEL))
    logger.info(f"easy: {n_paths} paths, atom at 2 carries {atom:.4f} "
                f"(closed form {easy_stop_probability():.4f})")
    return PathEnsemble(times, paths, seed, GENERATOR_ID,
                        {"kind": "easy", "steps": steps, "atom_mass": atom})


def _excursion_target(atom_target):
    """Target atom count as a function of (t, realized count at 1/2, block size)"""
    if atom_target is None:
        return lambda t, realized, size: realized
    if callable(atom_target):
        return lambda t, realized, size: int(round(atom_target(t) * size))
    return lambda t, realized, size: int(round(float(atom_target) * size))


def build_excursion(n_paths: int = 100_000, steps: int = 400,
                    atom_target: Optional[Union[float, Callable[[float], float]]] = None,
                    seed: int = 0, record_every: int = 20,
                    max_workers: Optional[int] = None) -> PathEnsemble:
    """
    强马氏对应过程 (Excursion variant with the marginals of build_easy)

    After 1/2 diffusing paths are absorbed when they hit 2 and the atom
    releases exactly enough paths each step to keep its mass at the target.
    Released paths restart one log-step away from 2, up or down with the
    mean-preserving probabilities.

    atom_target: None keeps the atom realized at 1/2 (per block); a float
    or a function of t gives the mass fraction.

    Raises:
        NumericalError: the atom falls below target (balance infeasible)
    """
    times = _record_grid(steps, record_every)
    half = _phase_step(0.5, steps, record_every)
    target = _excursion_target(atom_target)
    paths = run_blocks(n_paths, seed,
                       lambda gen, size: _stopped_gbm_block(gen, size, steps, record_every, half, half,
                                                            excursion=target),
                       max_workers)
    atom = float(np.mean(paths[:, -1] == ATOM_LEVEL))
    logger.info(f"excursion: {n_paths} paths, atom at 2 carries {atom:.4f} at t=1")
    return PathEnsemble(times, paths, seed, GENERATOR_ID,
                        {"kind": "excursion", "steps": steps, "atom_mass": atom})


def _gap_exit(y, y_new, lo, hi, dt, u_up, u_down, coin):
    """
    Which end of the log-gap (lo, hi) a step y -> y_new leaves through

    Each end is crossed when the step lands beyond it or, for an interior
    landing, with the Brownian-bridge crossing probability drawn from its
    own uniform. When both ends fire, `coin` picks up (True) or down.
    """
    cross_up = (y_new >= hi) | (np.isfinite(hi) & (u_up < np.exp(-2.0 * np.clip((hi - y) * (hi - y_new), 0, None) / dt)))
    cross_down = (y_new <= lo) | (np.isfinite(lo) & (u_down < np.exp(-2.0 * np.clip((y - lo) * (y_new - lo), 0, None) / dt)))
    both = cross_up & cross_down
    up = cross_up & (~both | coin)
    down = cross_down & (~both | ~coin)
    return up, down


def _cantor_block(gen, size, steps, record_every, start, stop, rule: HittingRule):
    dt = 1.0 / steps
    root_dt = np.sqrt(dt)
    width = 3.0 ** -rule.depth
    lefts = cantor_left_endpoints(rule.depth, rule.cantor_origin)
    rights = lefts + width
    log_lefts = np.log(lefts)
    log_rights = np.log(rights)

    y = np.zeros(size)
    stopped = np.zeros(size, dtype=bool)
    value = np.zeros(size)
    out = np.empty((size, steps // record_every + 1))
    out[:, 0] = 1.0

    for k in range(steps):
        z = gen.standard_normal(size)
        u_up, u_down, coin = gen.random(size), gen.random(size), gen.random(size) < 0.5
        free = ~stopped
        y_new = y + (-0.5 * dt + root_dt * z)
        if start <= k < stop:
            s = np.exp(y)
            idx = np.searchsorted(lefts, s, side="right") - 1
            inside = (idx >= 0) & (s <= rights[np.maximum(idx, 0)])
            # gap around s: (rights[idx], lefts[idx + 1])
            lo = np.where(idx >= 0, log_rights[np.maximum(idx, 0)], -np.inf)
            hi = np.where(idx + 1 < lefts.size, log_lefts[np.minimum(idx + 1, lefts.size - 1)], np.inf)
            up, down = _gap_exit(y, y_new, lo, hi, dt, u_up, u_down, coin)
            hit_now = free & inside
            value = np.where(hit_now, s, value)
            hit_up = free & ~inside & up
            hit_down = free & ~inside & down
            value = np.where(hit_up, np.exp(hi), value)
            value = np.where(hit_down, np.exp(lo), value)
            stopped |= hit_now | hit_up | hit_down
        y = np.where(stopped, np.log(np.where(stopped, value, 1.0)), y_new)
        if (k + 1) % record_every == 0:
            out[:, (k + 1) // record_every] = np.where(stopped, value, np.exp(y))
    return out


def build_cantor(n_paths: int = 100_000, steps: int = 360, depth: int = 8, seed: int = 0,
                 record_every: int = 20, max_workers: Optional[int] = None) -> PathEnsemble:
    """
    康托集停止 (GBM stopped on a depth-truncated Cantor set during [1/3, 2/3])

    Stopped values lie in K: paths already inside K at 1/3 stop where they
    are, the rest stop at the endpoint of the gap they leave. The largest
    atom shrinks as depth grows.
    """
    rule = HittingRule(kind="cantor", depth=depth, window=(1 / 3, 2 / 3))
    times = _record_grid(steps, record_every)
    start = _phase_step(1 / 3, steps, record_every)
    stop = _phase_step(2 / 3, steps, record_every)
    paths = run_blocks(n_paths, seed,
                       lambda gen, size: _cantor_block(gen, size, steps, record_every, start, stop, rule),
                       max_workers)
    logger.info(f"cantor: {n_paths} paths, depth {depth}")
    return PathEnsemble(times, paths, seed, GENERATOR_ID,
                        {"kind": "cantor", "steps": steps, "depth": depth})


def build_brownian(n_paths: int = 100_000, steps: int = 400, seed: int = 0, record_every: int = 20,
                   x0: float = 1.0, max_workers: Optional[int] = None) -> PathEnsemble:
    """x0 + W on the gallery time grid"""
    times = _record_grid(steps, record_every)
    ens = simulate_process(BrownianProcess(1.0), x0, times, n_paths, record_every, seed, max_workers)
    return PathEnsemble(ens.times, ens.paths, seed, ens.generator_id, {"kind": "brownian", "steps": steps})


def build(spec: GalleryProcessSpec, max_workers: Optional[int] = None) -> PathEnsemble:
    """Dispatch on spec.kind"""
    if spec.kind == "easy":
        return build_easy(spec.n_paths, spec.steps, spec.seed, spec.record_every, max_workers)
    if spec.kind == "excursion":
        return build_excursion(spec.n_paths, spec.steps, spec.atom_target, spec.seed,
                               spec.record_every, max_workers)
    if spec.kind == "cantor":
        return build_cantor(spec.n_paths, spec.steps, spec.depth, spec.seed, spec.record_every, max_workers)
    return build_brownian(spec.n_paths, spec.steps, spec.seed, spec.record_every, max_workers=max_workers)


# ------------------------------ Distinguishers ---------------------------- #

def w1_noise_band(a: np.ndarray, b: Optional[np.ndarray] = None, sigmas: float = 3.0) -> float:
    """
    Sampling scale of W1 between two independent empirical laws

    E|F_a - F_b| is about sqrt(2/pi) sqrt(F(1-F)(1/n_a + 1/n_b)) pointwise;
    integrated over the pooled CDF and multiplied by `sigmas`. Without `b`
    the band is that of `a` against its own exact law.
    """
    pooled = np.sort(a if b is None else np.concatenate((a, b)))
    if pooled.size < 2:
        return 0.0
    f = np.arange(1, pooled.size) / pooled.size
    spread = float(np.sum(np.sqrt(f * (1 - f)) * np.diff(pooled)))
    inverse_n = 1 / a.size if b is None else 1 / a.size + 1 / b.size
    return sigmas * np.sqrt(2 / np.pi) * spread * np.sqrt(inverse_n)


def _difference(a: Estimate, b: Estimate, alpha: float) -> Estimate:
    """b - a with a normal interval from the two standard errors"""
    z = norm.ppf(1 - alpha / 2)
    se_a = (a.ci_high - a.ci_low) / (2 * z)
    se_b = (b.ci_high - b.ci_low) / (2 * z)
    diff = b.value - a.value
    half = z * np.hypot(se_a, se_b)
    return Estimate(diff, diff - half, diff + half, min(a.n, b.n))


@dataclass
class DistinguisherReport:
    t1: float
    t2: float
    leave_prob_a: Estimate
    leave_prob_b: Estimate
    leave_prob_diff: Estimate
    product_a: Estimate
    product_b: Estimate
    product_diff: Estimate
    marginal_w1: Dict[str, float] = field(default_factory=dict)
    marginal_band: Dict[str, float] = field(default_factory=dict)

    @property
    def joint_laws_differ(self) -> bool:
        return self.leave_prob_diff.excludes(0.0) or self.product_diff.excludes(0.0)

    @property
    def marginals_match(self) -> bool:
        return all(self.marginal_w1[k] <= 0.01 + self.marginal_band[k] for k in self.marginal_w1)

    def to_dict(self):
        data = asdict(self)
        data.update(joint_laws_differ=self.joint_laws_differ, marginals_match=self.marginals_match)
        return data


def joint_law_distinguisher(a: PathEnsemble, b: PathEnsemble, t1: float = 0.75, t2: float = 1.0,
                            alpha: float = 0.05, marginal_times=(0.6, 0.8, 1.0)) -> DistinguisherReport:
    """
    联合分布判别 (Same marginals, different joint laws?)

    Estimates P(X_t1 = 2, X_t2 != 2) and E[f(X_t1) g(X_t2)] with
    f(x) = exp(-(x - 2)^2), g(x) = (x - 2)_+ on both ensembles, plus the
    marginal W1 distances with their sampling band.
    """
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times):
        raise ValidationError("ensembles do not share a time grid")

    def _leave(ens):
        x1, x2 = ens.at(t1), ens.at(t2)
        hits = int(np.sum((x1 == ATOM_LEVEL) & (x2 != ATOM_LEVEL)))
        return proportion_estimate(hits, ens.n_paths, alpha)

    def _product(ens):
        x1, x2 = ens.at(t1), ens.at(t2)
        return mean_estimate(np.exp(-(x1 - ATOM_LEVEL) ** 2) * np.maximum(x2 - ATOM_LEVEL, 0.0), alpha)

    leave_a, leave_b = _leave(a), _leave(b)
    prod_a, prod_b = _product(a), _product(b)
    w1, band = {}, {}
    for t in marginal_times:
        key = f"{t:g}"
        w1[key] = w1_distance(empirical_marginal(a, t), empirical_marginal(b, t))
        band[key] = w1_noise_band(a.at(t), b.at(t))
    report = DistinguisherReport(t1, t2, leave_a, leave_b, _difference(leave_a, leave_b, alpha),
                                 prod_a, prod_b, _difference(prod_a, prod_b, alpha), w1, band)
    logger.info(f"Distinguisher: leave-prob diff {report.leave_prob_diff.value:.4f} "
                f"[{report.leave_prob_diff.ci_low:.4f}, {report.leave_prob_diff.ci_high:.4f}]")
    return report


@dataclass
class MonotonicityViolation:
    lower: int
    upper: int
    source_lower: float
    source_upper: float
    excess: float
    slack: float


@dataclass
class KernelMonotonicityReport:
    passed: bool
    violations: List[MonotonicityViolation]
    flagged_bins: List[int]
    source_points: List[float]

    def to_dict(self):
        return asdict(self)


def kernel_monotonicity_test(ens: PathEnsemble, s: float, t: float, bins=20, min_count: int = 50,
                             alpha: float = 0.05) -> KernelMonotonicityReport:
    """
    一阶单调性检验 (First-order monotonicity of x -> pi_x^{s,t})

    Every adjacent pair of populated bins must satisfy F_upper <= F_lower
    up to the one-sided two-sample KS slack sqrt(-ln(alpha)/2) sqrt(1/n1 + 1/n2).
    Bins under min_count paths are flagged and skipped.
    """
    kernel = empirical_kernel(ens, s, t, bins, min_count)
    cdfs = kernel.row_cdfs()
    flagged = set(kernel.sparse_rows)
    populated = [i for i in range(kernel.n_source) if i not in flagged]
    violations = []
    for lower, upper in zip(populated[:-1], populated[1:]):
        n1, n2 = kernel.counts[lower], kernel.counts[upper]
        slack = np.sqrt(-np.log(alpha) / 2) * np.sqrt(1 / n1 + 1 / n2)
        excess = float(np.max(cdfs[upper] - cdfs[lower]))
        if excess > slack:
            violations.append(MonotonicityViolation(lower, upper, float(kernel.source_grid[lower]),
                                                    float(kernel.source_grid[upper]), excess, float(slack)))
    if violations:
        logger.info(f"Kernel monotonicity ({s:g} -> {t:g}) fails at {len(violations)} bin pairs")
    return KernelMonotonicityReport(not violations, violations, sorted(flagged),
                                    kernel.source_grid.tolist())


# ------------------------------ Regularity preservation ------------------- #

def shape_functions(center: float = 1.0) -> Dict[str, Callable[[np.ndarray], np.ndarray]]:
    """x (increasing), |x - center| (1-Lipschitz), (x - center)_+ (convex)"""
    return {
        "increasing": lambda x: x,
        "lipschitz": lambda x: np.abs(x - center),
        "convex": lambda x: np.maximum(x - center, 0.0),
    }


@dataclass
class PropertyCheck:
    name: str
    holds: bool
    worst_excess: float
    worst_bin: Optional[int]


@dataclass
class RegularityReport:
    checks: List[PropertyCheck]
    source_points: List[float]
    values: Dict[str, List[float]]

    @property
    def passed(self) -> bool:
        return all(c.holds for c in self.checks)

    def to_dict(self):
        data = asdict(self)
        data["passed"] = self.passed
        return data


def regularity_preservation_test(ens: PathEnsemble, t: float, T: Optional[float] = None, bins=20,
                                 min_count: int = 50, alpha: float = 0.05,
                                 center: float = 1.0) -> RegularityReport:
    """
    正则性保持检验 (Does x -> E[g(X_T) | X_t ~ x] inherit the shape of g?)

    x is increasing, |x - center| is 1-Lipschitz and (x - center)_+ is convex;
    the binned conditional expectations are checked for the same property
    with a normal slack built from the per-bin standard errors, Bonferroni
    corrected over every bin comparison. Putting `center` on an atom tests
    the kink a non-strong-Markov ensemble leaves there.
    """
    T = float(ens.times[-1]) if T is None else T
    kernel = empirical_kernel(ens, t, T, bins, min_count)
    keep = np.array([i for i in range(kernel.n_source) if i not in set(kernel.sparse_rows)])
    x = kernel.source_grid[keep]
    rows = kernel.rows[keep]
    n = kernel.counts[keep].astype(np.float64)
    comparisons = max(2 * (x.size - 1) + max(x.size - 2, 0), 1)
    z = norm.ppf(1 - alpha / (2 * comparisons))

    checks, values = [], {}
    for name, g in shape_functions(center).items():
        gy = g(kernel.target_grid)
        v = rows @ gy
        se = np.sqrt(np.clip(rows @ gy ** 2 - v ** 2, 0.0, None) / n)
        values[name] = v.tolist()
        dx = np.diff(x)
        if name == "increasing":
            excess = -(np.diff(v)) - z * np.hypot(se[:-1], se[1:])
        elif name == "lipschitz":
            excess = np.abs(np.diff(v)) - dx - z * np.hypot(se[:-1], se[1:])
        else:
            slopes = np.diff(v) / dx
            h1, h2 = dx[:-1], dx[1:]
            slack = z * np.sqrt((se[:-2] / h1) ** 2 + (se[1:-1] * (1 / h1 + 1 / h2)) ** 2 + (se[2:] / h2) ** 2)
            excess = -(np.diff(slopes)) - slack
        if excess.size == 0:
            checks.append(PropertyCheck(name, True, 0.0, None))
            continue
        worst = int(np.argmax(excess))
        checks.append(PropertyCheck(name, bool(excess[worst] <= 0), float(excess[worst]), int(keep[worst])))
    report = RegularityReport(checks, x.tolist(), values)
    logger.info("Regularity preservation: " + ", ".join(f"{c.name}={'ok' if c.holds else 'FAIL'}"
                                                         for c in checks))
    return report

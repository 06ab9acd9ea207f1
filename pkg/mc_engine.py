"""
蒙特卡洛引擎 (Monte Carlo Engine)

Seeded Euler-Maruyama simulation of driftless diffusions dX = sigma(t, X) dW
plus the estimators the rest of the lab reads off path ensembles: empirical
marginals, binned transition kernels, conditional call prices and
martingale diagnostics.

Paths are produced in fixed blocks of BLOCK_SIZE. Block b draws from a
Philox stream keyed by (seed, b) and always draws a full block, so adding
paths never changes the ones already simulated. Blocks run on a thread pool.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Callable, List, Optional, Union

import numpy as np
from statsmodels.stats.proportion import proportion_confint
from statsmodels.stats.weightstats import DescrStatsW

from core.base_process import BaseProcess
from core.exceptions import ValidationError
from core.io_schema import MULTIPLICATIVE, GridMeasure, LocalVolSurface, MartingaleKernel, PathEnsemble
from measures import from_atoms, quantile

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
GENERATOR_ID = f"philox4x64-block{BLOCK_SIZE}"
DEFAULT_WORKERS = 4
THREADS_ENV = "PEACOCK_LAB_THREADS"


# ------------------------------ RNG / blocks ------------------------------ #

def resolve_workers(max_workers: Optional[int] = None) -> int:
    """Worker count: explicit argument, else PEACOCK_LAB_THREADS, else 4; never above the CPU count"""
    if max_workers is None:
        env = os.environ.get(THREADS_ENV)
        try:
            max_workers = int(env) if env else DEFAULT_WORKERS
        except ValueError:
            logger.warning(f"Ignoring invalid {THREADS_ENV}={env!r}")
            max_workers = DEFAULT_WORKERS
    return max(1, min(max_workers, os.cpu_count() or 1))


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of paths"""
    seed, block = int(seed), int(block)
    if not 0 <= seed < 2 ** 64:
        raise ValidationError("seed must be a 64-bit unsigned integer", witness=seed)
    return np.random.Generator(np.random.Philox(key=(seed << 64) | block))


def run_blocks(n_paths: int, seed: int, simulate_block: Callable[[np.random.Generator, int], np.ndarray],
               max_workers: Optional[int] = None) -> np.ndarray:
    """
    Run simulate_block(generator, size) for every block and stack the rows

    Args:
        n_paths: Total number of paths (rows)
        seed: Stream seed
        simulate_block: Returns an array whose first axis has `size` rows
        max_workers: Thread cap (see resolve_workers)
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be positive")
    n_blocks = -(-n_paths // BLOCK_SIZE)

    def _run(block: int) -> np.ndarray:
        return simulate_block(block_generator(seed, block), BLOCK_SIZE)

    workers = resolve_workers(max_workers)
    if workers == 1 or n_blocks == 1:
        parts = [_run(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(_run, range(n_blocks)))
    return np.concatenate(parts, axis=0)[:n_paths]


# ------------------------------ Processes --------------------------------- #

class BrownianProcess(BaseProcess):
    """sigma(t, x) = sigma"""

    def __init__(self, sigma: float = 1.0):
        if sigma < 0:
            raise ValidationError("sigma must be nonnegative")
        self.vol = float(sigma)

    def sigma(self, t, x):
        return np.full_like(x, self.vol, dtype=np.float64)

    def get_info(self) -> dict:
        return {"name": "brownian", "sigma": self.vol, "convention": "additive"}


class LocalVolProcess(BaseProcess):
    """Bilinear interpolation of a LocalVolSurface; relative vol in the multiplicative convention"""

    def __init__(self, lv: LocalVolSurface):
        self.lv = lv

    def sigma(self, t, x):
        sig = self.lv.sigma_at(t, x)
        if self.lv.convention == MULTIPLICATIVE:
            return sig * x
        return sig

    def get_info(self) -> dict:
        return {"name": "local_vol", "convention": self.lv.convention,
                "grid": [int(self.lv.times.size), int(self.lv.strikes.size)],
                "clamped_nodes": len(self.lv.clamp_report)}


def _sample_init(init: Union[GridMeasure, float], gen: np.random.Generator, size: int) -> np.ndarray:
    if isinstance(init, GridMeasure):
        return np.asarray(quantile(init, gen.random(size)), dtype=np.float64)
    return np.full(size, float(init))


def simulate_process(process: BaseProcess, init: Union[GridMeasure, float], times, n_paths: int,
                     steps_per_interval: int = 4, seed: int = 0,
                     max_workers: Optional[int] = None) -> PathEnsemble:
    """
    欧拉模拟 (Euler-Maruyama paths recorded at `times`)

    Initial states are drawn by inverse CDF from `init` (or fixed at a point).
    """
    times = np.asarray(times, dtype=np.float64)
    if steps_per_interval < 1:
        raise ValidationError("steps_per_interval must be positive")

    def _block(gen: np.random.Generator, size: int) -> np.ndarray:
        out = np.empty((size, times.size))
        x = _sample_init(init, gen, size)
        out[:, 0] = x
        for k in range(times.size - 1):
            dt = (times[k + 1] - times[k]) / steps_per_interval
            for n in range(steps_per_interval):
                x = process.euler_step(times[k] + n * dt, x, dt, gen.standard_normal(size))
            out[:, k + 1] = x
        return out

    paths = run_blocks(n_paths, seed, _block, max_workers)
    info = process.get_info()
    logger.info(f"Simulated {n_paths} paths of {info['name']} on {times.size} times (seed {seed})")
    return PathEnsemble(times, paths, seed, GENERATOR_ID,
                        {"process": info, "steps_per_interval": steps_per_interval})


def simulate_localvol(lv: LocalVolSurface, init: Union[GridMeasure, float], n_paths: int,
                      steps_per_interval: int = 4, seed: int = 0,
                      max_workers: Optional[int] = None) -> PathEnsemble:
    return simulate_process(LocalVolProcess(lv), init, lv.times, n_paths, steps_per_interval,
                            seed, max_workers)


# ------------------------------ Estimators -------------------------------- #

@dataclass(frozen=True)
class Estimate:
    """Point estimate with a two-sided confidence interval"""
    value: float
    ci_low: float
    ci_high: float
    n: int

    def excludes(self, x: float = 0.0) -> bool:
        return x < self.ci_low or x > self.ci_high

    def to_dict(self):
        return asdict(self)


def mean_estimate(samples: np.ndarray, alpha: float = 0.05) -> Estimate:
    """Sample mean with a t interval; degenerate interval for constant samples"""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValidationError("no samples to average")
    mean = float(samples.mean())
    if samples.size < 2 or np.ptp(samples) == 0:
        return Estimate(mean, mean, mean, int(samples.size))
    low, high = DescrStatsW(samples).tconfint_mean(alpha=alpha)
    return Estimate(mean, float(low), float(high), int(samples.size))


def proportion_estimate(hits: int, n: int, alpha: float = 0.05) -> Estimate:
    """Wilson interval for a binomial proportion"""
    if n <= 0:
        raise ValidationError("proportion of an empty sample")
    low, high = proportion_confint(hits, n, alpha=alpha, method="wilson")
    return Estimate(hits / n, float(low), float(high), int(n))


def empirical_marginal(ens: PathEnsemble, t: float, bins: Optional[int] = None) -> GridMeasure:
    """
    Law of X_t: atoms at observed states with weight 1/n

    With `bins`, states are pooled into equal-width bins located at their
    within-bin means (mean preserving).
    """
    x = ens.at(t)
    if bins is None:
        return from_atoms(x, label=f"empirical(t={t:g})")
    edges = np.linspace(x.min(), x.max(), bins + 1)
    idx = np.clip(np.digitize(x, edges[1:-1]), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sums = np.bincount(idx, weights=x, minlength=bins)
    keep = counts > 0
    return from_atoms(sums[keep] / counts[keep], counts[keep], label=f"empirical(t={t:g}, bins={bins})")


def _source_bins(xs: np.ndarray, source_bins, min_count: int) -> np.ndarray:
    """
    Bin label per path

    Values repeated at least min_count times are atoms with their own bin;
    the remaining values fall into equal-width bins split at every atom.
    """
    values, counts = np.unique(xs, return_counts=True)
    atoms = values[counts >= max(min_count, 2)]
    is_atom = np.isin(xs, atoms)
    rest = xs[~is_atom]
    if np.ndim(source_bins) == 0:
        lo, hi = (rest.min(), rest.max()) if rest.size else (xs.min(), xs.max())
        edges = np.linspace(lo, hi, int(source_bins) + 1)[1:-1]
    else:
        edges = np.asarray(source_bins, dtype=np.float64)[1:-1]
    edges = np.union1d(edges, atoms)

    labels = np.empty(xs.size, dtype=np.int64)
    labels[~is_atom] = 2 * np.searchsorted(edges, rest, side="right")
    # atom k sits between continuous bins 2k' and 2k'+2
    labels[is_atom] = 2 * np.searchsorted(edges, xs[is_atom], side="left") + 1
    return labels


def empirical_kernel(ens: PathEnsemble, s: float, t: float, source_bins=20,
                     min_count: int = 50) -> MartingaleKernel:
    """
    经验转移核 (Binned conditional law of X_t given X_s)

    Source points are within-bin means of X_s (atoms exactly); the target
    grid is the set of observed X_t values. Bins with fewer than min_count
    paths are listed in sparse_rows; empty bins are dropped.
    """
    i_s, i_t = ens.index_of(s), ens.index_of(t)
    if i_s >= i_t:
        raise ValidationError("empirical kernel needs s < t", witness=[s, t])
    if ens.n_paths == 0:
        raise ValidationError("empty ensemble")
    xs = ens.paths[:, i_s]
    xt = ens.paths[:, i_t]

    labels = _source_bins(xs, source_bins, min_count)
    used, bin_of = np.unique(labels, return_inverse=True)
    counts = np.bincount(bin_of)
    sources = np.bincount(bin_of, weights=xs) / counts

    targets, target_of = np.unique(xt, return_inverse=True)
    flat = np.bincount(bin_of * targets.size + target_of, minlength=used.size * targets.size)
    rows = flat.reshape(used.size, targets.size).astype(np.float64)

    order = np.argsort(sources, kind="stable")
    sources, rows, counts = sources[order], rows[order], counts[order]
    # bins whose means coincide are merged
    merged_src, inverse = np.unique(sources, return_inverse=True)
    if merged_src.size < sources.size:
        rows = np.vstack([rows[inverse == k].sum(axis=0) for k in range(merged_src.size)])
        counts = np.bincount(inverse, weights=counts).astype(np.int64)
        sources = merged_src
    rows /= counts[:, None]
    sparse = tuple(int(i) for i in np.flatnonzero(counts < min_count))
    if sparse:
        logger.warning(f"Kernel ({s:g} -> {t:g}): {len(sparse)} of {counts.size} bins below {min_count} paths")
    return MartingaleKernel(sources, targets, rows, counts / counts.sum(), counts, sparse)


def conditional_price(ens: PathEnsemble, t: float, strike: float, z: float, bandwidth: float = 0.0,
                      T: Optional[float] = None, alpha: float = 0.05) -> Estimate:
    """
    条件期权价格 (E[(X_T - strike)_+ | X_t ~ z])

    bandwidth=0 conditions on X_t == z exactly (atomic states); otherwise on
    |X_t - z| <= bandwidth. t may be any grid time in [0, T).
    """
    T = float(ens.times[-1]) if T is None else T
    i_t, i_T = ens.index_of(t), ens.index_of(T)
    if i_t >= i_T:
        raise ValidationError("conditional price needs t < T", witness=[t, T])
    xt = ens.paths[:, i_t]
    window = xt == z if bandwidth == 0 else np.abs(xt - z) <= bandwidth
    if not window.any():
        raise ValidationError(f"no paths with X_{t:g} within {bandwidth:g} of {z:g}", witness=z)
    payoff = np.maximum(ens.paths[window, i_T] - strike, 0.0)
    return mean_estimate(payoff, alpha)


# ------------------------------ Martingale checks ------------------------- #

@dataclass(frozen=True)
class MartingaleReport:
    times: List[float]
    drift: List[float]
    band: List[float]
    holds: bool

    def to_dict(self):
        return asdict(self)


def martingale_report(ens: PathEnsemble, sigmas: float = 4.0) -> MartingaleReport:
    """|E[X_t - X_0]| against sigmas * std / sqrt(n) at every recorded time"""
    inc = ens.paths - ens.paths[:, :1]
    drift = inc.mean(axis=0)
    band = sigmas * inc.std(axis=0) / np.sqrt(ens.n_paths)
    holds = bool(np.all(np.abs(drift) <= band + 1e-12))
    if not holds:
        k = int(np.argmax(np.abs(drift) - band))
        logger.warning(f"Martingale band exceeded at t={ens.times[k]:g}: drift {drift[k]:.3e}")
    return MartingaleReport(ens.times.tolist(), drift.tolist(), band.tolist(), holds)


def increment_second_moment(ens: PathEnsemble, s: float, t: float, alpha: float = 0.05) -> Estimate:
    """E[(X_t - X_s)^2] with confidence interval"""
    inc = ens.at(t) - ens.at(s)
    return mean_estimate(inc ** 2, alpha)

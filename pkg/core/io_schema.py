"""
Standardized domain types shared by every lab module.

All containers are frozen dataclasses holding read-only numpy arrays; the
invariants listed for each type are checked in __post_init__.
"""
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, Optional, Tuple, Union, Callable

import numpy as np

from core.exceptions import ValidationError

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"
CONVENTIONS = (ADDITIVE, MULTIPLICATIVE)

MASS_TOL = 1e-12
ROW_MASS_TOL = 1e-10


def _frozen_array(name: str, values, ndim: int = 1) -> np.ndarray:
    """Copy into a read-only float64 array of the given rank, rejecting NaN/Inf"""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def _strictly_increasing(name: str, arr: np.ndarray):
    if arr.size > 1 and np.any(np.diff(arr) <= 0):
        bad = int(np.argmin(np.diff(arr)))
        raise ValidationError(f"{name} must be strictly increasing", witness=float(arr[bad + 1]))


def trapezoid_cells(grid: np.ndarray) -> np.ndarray:
    """Trapezoidal cell widths; a single node gets width 1"""
    if grid.size == 1:
        return np.ones(1)
    widths = np.empty_like(grid)
    gaps = np.diff(grid)
    widths[0] = gaps[0] / 2
    widths[-1] = gaps[-1] / 2
    widths[1:-1] = (gaps[:-1] + gaps[1:]) / 2
    return widths


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """
    离散测度 (Probability measure on a finite grid)

    Atoms at `grid` with masses `weights`. Densities are stored as
    weight = density x trapezoidal cell width.
    """
    grid: np.ndarray
    weights: np.ndarray
    label: str = ""

    def __post_init__(self):
        grid = _frozen_array("grid", self.grid)
        weights = _frozen_array("weights", self.weights)
        if grid.size == 0 or grid.shape != weights.shape:
            raise ValidationError("grid and weights must be non-empty and of equal length")
        _strictly_increasing("grid", grid)
        if np.any(weights < 0):
            raise ValidationError("weights must be nonnegative", witness=float(grid[np.argmin(weights)]))
        total = float(weights.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise ValidationError(f"weights sum to {total!r}, expected 1")
        _set(self, "grid", grid)
        _set(self, "weights", weights)

    @property
    def size(self) -> int:
        return int(self.grid.size)

    @property
    def density(self) -> np.ndarray:
        return self.weights / trapezoid_cells(self.grid)

    @property
    def mean(self) -> float:
        return float(self.weights @ self.grid)

    def __repr__(self):
        return f"GridMeasure(n={self.size}, mean={self.mean:.6g}, label={self.label!r})"


@dataclass(frozen=True, eq=False)
class PeacockFamily:
    """
    测度族 (Family of measures indexed by time)

    Convex-order monotonicity is verified by measures.verify_peacock,
    never assumed here.
    """
    times: np.ndarray
    measures: Tuple[GridMeasure, ...]
    label: str = ""

    def __post_init__(self):
        times = _frozen_array("times", self.times)
        _strictly_increasing("times", times)
        measures = tuple(self.measures)
        if len(measures) != times.size or not measures:
            raise ValidationError("one measure per time is required")
        _set(self, "times", times)
        _set(self, "measures", measures)

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9))
        if hits.size == 0:
            raise ValidationError(f"time {t} is not a family node", witness=t)
        return int(hits[0])

    def at(self, t: float) -> GridMeasure:
        return self.measures[self.index_of(t)]

    def __len__(self):
        return len(self.measures)


@dataclass(frozen=True, eq=False)
class CallSurface:
    """
    看涨期权价格曲面 (Call-price surface C(t, x))

    prices[i, j] is the call price at times[i] and strikes[j]. `forward`
    is the common mean of the marginals when known.
    """
    times: np.ndarray
    strikes: np.ndarray
    prices: np.ndarray
    convention: str = ADDITIVE
    forward: Optional[float] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen_array("times", self.times)
        strikes = _frozen_array("strikes", self.strikes)
        prices = _frozen_array("prices", self.prices, ndim=2)
        _strictly_increasing("times", times)
        _strictly_increasing("strikes", strikes)
        if prices.shape != (times.size, strikes.size):
            raise ValidationError(f"prices shape {prices.shape} does not match grid "
                                  f"({times.size}, {strikes.size})")
        if self.convention not in CONVENTIONS:
            raise ValidationError(f"unknown convention {self.convention!r}")
        if self.convention == MULTIPLICATIVE and strikes[0] <= 0:
            raise ValidationError("multiplicative convention requires positive strikes",
                                  witness=float(strikes[0]))
        _set(self, "times", times)
        _set(self, "strikes", strikes)
        _set(self, "prices", prices)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.prices.shape


@dataclass(frozen=True)
class ClampRecord:
    """One clamped local-volatility node"""
    i: int
    j: int
    reason: str


@dataclass(frozen=True, eq=False)
class LocalVolSurface:
    """
    局部波动率曲面 (Local volatility sigma(t, x))

    Same rectangle as the CallSurface it was calibrated from. In the
    multiplicative convention sigma is relative (dS = sigma S dW).
    """
    times: np.ndarray
    strikes: np.ndarray
    sigma: np.ndarray
    convention: str = ADDITIVE
    clamp_report: Tuple[ClampRecord, ...] = ()
    sigma_min: float = 0.0
    sigma_max: float = np.inf

    def __post_init__(self):
        times = _frozen_array("times", self.times)
        strikes = _frozen_array("strikes", self.strikes)
        sigma = _frozen_array("sigma", self.sigma, ndim=2)
        _strictly_increasing("times", times)
        _strictly_increasing("strikes", strikes)
        if sigma.shape != (times.size, strikes.size):
            raise ValidationError("sigma shape does not match the time x strike grid")
        if np.any(sigma < 0):
            raise ValidationError("sigma must be nonnegative")
        if np.any(sigma < self.sigma_min - 1e-12) or np.any(sigma > self.sigma_max + 1e-12):
            raise ValidationError("sigma outside configured bounds")
        if self.convention not in CONVENTIONS:
            raise ValidationError(f"unknown convention {self.convention!r}")
        _set(self, "times", times)
        _set(self, "strikes", strikes)
        _set(self, "sigma", sigma)
        _set(self, "clamp_report", tuple(self.clamp_report))

    def sigma_row(self, t: float) -> np.ndarray:
        """Sigma on the strike grid at time t, linear in time, flat outside"""
        if t <= self.times[0]:
            return self.sigma[0]
        if t >= self.times[-1]:
            return self.sigma[-1]
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        w = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return (1 - w) * self.sigma[i] + w * self.sigma[i + 1]

    def sigma_at(self, t: float, x) -> np.ndarray:
        """Bilinear interpolation with flat extrapolation in both directions"""
        return np.interp(x, self.strikes, self.sigma_row(t))


@dataclass(frozen=True, eq=False)
class MartingaleKernel:
    """
    鞅转移核 (Disintegrated martingale transition law)

    rows[i] is the law pi_x on target_grid for x = source_grid[i]. The
    martingale condition is measured by martingale_defect(), not enforced,
    so that empirical kernels fit the same container.
    """
    source_grid: np.ndarray
    target_grid: np.ndarray
    rows: np.ndarray
    source_weights: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    sparse_rows: Tuple[int, ...] = ()

    def __post_init__(self):
        source = _frozen_array("source_grid", self.source_grid)
        target = _frozen_array("target_grid", self.target_grid)
        rows = _frozen_array("rows", self.rows, ndim=2)
        _strictly_increasing("source_grid", source)
        _strictly_increasing("target_grid", target)
        if rows.shape != (source.size, target.size):
            raise ValidationError("rows shape must be (len(source_grid), len(target_grid))")
        if np.any(rows < 0):
            raise ValidationError("kernel rows must be nonnegative")
        row_mass = rows.sum(axis=1)
        if np.any(np.abs(row_mass - 1) > ROW_MASS_TOL):
            bad = int(np.argmax(np.abs(row_mass - 1)))
            raise ValidationError("kernel row does not sum to 1", witness=float(source[bad]))
        _set(self, "source_grid", source)
        _set(self, "target_grid", target)
        _set(self, "rows", rows)
        if self.source_weights is not None:
            _set(self, "source_weights", _frozen_array("source_weights", self.source_weights))
        if self.counts is not None:
            _set(self, "counts", np.asarray(self.counts, dtype=np.int64))
        _set(self, "sparse_rows", tuple(int(i) for i in self.sparse_rows))

    @property
    def n_source(self) -> int:
        return int(self.source_grid.size)

    def row(self, i: int) -> GridMeasure:
        return GridMeasure(self.target_grid, self.rows[i] / self.rows[i].sum())

    def row_means(self) -> np.ndarray:
        return self.rows @ self.target_grid

    def martingale_defect(self) -> np.ndarray:
        return self.row_means() - self.source_grid

    def row_cdfs(self) -> np.ndarray:
        return np.cumsum(self.rows, axis=1)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """
    路径集合 (Seeded Monte Carlo paths)

    paths has one row per path and one column per recorded time.
    """
    times: np.ndarray
    paths: np.ndarray
    seed: int
    generator_id: str
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen_array("times", self.times)
        paths = _frozen_array("paths", self.paths, ndim=2)
        _strictly_increasing("times", times)
        if paths.shape[1] != times.size:
            raise ValidationError("paths must have one column per time")
        _set(self, "times", times)
        _set(self, "paths", paths)

    @property
    def n_paths(self) -> int:
        return int(self.paths.shape[0])

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9))
        if hits.size == 0:
            raise ValidationError(f"time {t} is not on the ensemble grid", witness=t)
        return int(hits[0])

    def at(self, t: float) -> np.ndarray:
        return self.paths[:, self.index_of(t)]


@dataclass(frozen=True)
class HittingRule:
    """
    击中规则 (Barrier set and the window in which it stops paths)

    kind 'level' stops at `level`; kind 'cantor' stops on the depth-truncated
    Cantor set origin + {sum eps_n 3^-n, eps_n in {0, 2}}.
    """
    kind: str = "level"
    level: float = 2.0
    cantor_origin: float = 1.0
    depth: int = 8
    window: Tuple[float, float] = (0.0, 0.5)

    def __post_init__(self):
        if self.kind not in ("level", "cantor"):
            raise ValidationError(f"unknown barrier kind {self.kind!r}")
        if self.kind == "cantor" and not 1 <= self.depth <= 20:
            raise ValidationError("cantor depth must lie in [1, 20]", witness=self.depth)
        if not self.window[0] < self.window[1]:
            raise ValidationError("active window must be a proper interval")


GALLERY_KINDS = ("easy", "cantor", "excursion", "brownian")
PHASES = {
    "easy": (0.0, 0.5, 1.0),
    "excursion": (0.0, 0.5, 1.0),
    "cantor": (0.0, 1 / 3, 2 / 3, 1.0),
    "brownian": (0.0, 1.0),
}


@dataclass(frozen=True)
class GalleryProcessSpec:
    """
    示例过程规格 (Gallery process specification)

    `steps` fine time steps on [0, 1], recorded every `record_every` steps.
    Every phase boundary must fall on a recorded time.
    """
    kind: str
    n_paths: int = 100_000
    steps: int = 400
    seed: int = 0
    record_every: int = 20
    depth: int = 8
    atom_target: Optional[Union[float, Callable[[float], float]]] = None

    def __post_init__(self):
        if self.kind not in GALLERY_KINDS:
            raise ValidationError(f"unknown gallery kind {self.kind!r}")
        if self.n_paths < 1 or self.steps < 1 or self.record_every < 1:
            raise ValidationError("n_paths, steps and record_every must be positive")
        if self.steps % self.record_every:
            raise ValidationError("steps must be a multiple of record_every")
        for boundary in self.phase_times[1:-1]:
            k = boundary * self.steps
            if abs(k - round(k)) > 1e-9 or round(k) % self.record_every:
                raise ValidationError(f"phase boundary {boundary:.4f} is not a recorded grid time",
                                      witness=boundary)

    @property
    def phase_times(self) -> Tuple[float, ...]:
        return PHASES[self.kind]

    @property
    def hitting_rule(self) -> HittingRule:
        if self.kind == "cantor":
            return HittingRule(kind="cantor", depth=self.depth, window=(1 / 3, 2 / 3))
        return HittingRule(kind="level", level=2.0, window=(0.0, 0.5))


@dataclass(frozen=True)
class Verdict:
    """Outcome of an order predicate with the first violating strike"""
    holds: bool
    witness: Optional[float] = None
    reason: str = ""
    max_violation: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def config_from_dict(cls, data: Dict[str, Any]):
    """Build a config dataclass from a flat dict, ignoring unrelated keys"""
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in (data or {}).items() if k in names})


FP_SCHEMES = ("crank_nicolson", "explicit", "implicit")


@dataclass(frozen=True)
class FpSolveConfig:
    """
    前向方程求解参数 (Forward-equation solver settings)

    grid=None pads the local-vol strike grid to +-pad_std terminal standard
    deviations. substeps=None picks the count automatically (the CFL-safe
    minimum for the explicit scheme).
    """
    scheme: str = "crank_nicolson"
    grid: Optional[Tuple[float, ...]] = None
    substeps: Optional[int] = None
    boundary: str = "zero_flux"
    pad_std: float = 6.0
    cfl_limit: float = 0.5
    negative_tol: float = 1e-12
    price_floor: float = 1e-2
    interior_margin: int = 2

    def __post_init__(self):
        if self.scheme not in FP_SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.boundary != "zero_flux":
            raise ValidationError(f"unsupported boundary {self.boundary!r}")
        if self.substeps is not None and self.substeps < 1:
            raise ValidationError("substeps must be positive")
        if self.grid is not None:
            _set(self, "grid", tuple(float(x) for x in self.grid))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FpSolveConfig":
        return config_from_dict(cls, data)

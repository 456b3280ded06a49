"""Time grids, Brownian bundles, particle ensembles and empirical laws.

Everything random in the package is drawn from counter-based Philox streams
keyed by ``(seed, purpose, path, component)``, so a value never depends on
how many workers produced it or in which order. Reductions over paths go
through :func:`path_sum`, which sums fixed-size chunks and combines the
partial sums with a pairwise tree.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

WORKERS_ENV = "TAGGED_MFTG_WORKERS"
CHUNK = 2048

# stream purposes; kept stable so that saved seeds stay meaningful
PURPOSES = {
    "brownian_x": 1,
    "brownian_y": 2,
    "terminal_y": 3,
    "initial_y": 4,
    "initial_x": 5,
    "explore": 6,
    "spike": 7,
}


class InvalidArgument(ValueError):
    """Raised on malformed arguments to the numerical routines."""


# ---------------------------------------------------------------------------
# workers and deterministic reductions


def resolve_workers(workers: Optional[int] = None) -> int:
    """Worker count: explicit argument, else the environment cap, else 1."""
    if workers is None:
        raw = os.environ.get(WORKERS_ENV, "").strip()
        workers = int(raw) if raw else 1
    if workers < 1:
        raise InvalidArgument(f"worker count must be >= 1, got {workers}")
    return int(workers)


def chunk_slices(n: int, size: int = CHUNK) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def tree_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise sum in a fixed order: ((p0+p1)+(p2+p3))+..."""
    if not parts:
        raise InvalidArgument("tree_sum of nothing")
    level = list(parts)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def map_chunks(fn: Callable[[slice], np.ndarray], n: int, workers: Optional[int] = None) -> list:
    """Apply ``fn`` to each path chunk; the result order never depends on workers."""
    slices = chunk_slices(n)
    w = resolve_workers(workers)
    if w == 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, slices))


def path_sum(a: np.ndarray, axis: int = 0, workers: Optional[int] = None) -> np.ndarray:
    """Sum over the path axis with the chunked pairwise tree."""
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    return tree_sum(map_chunks(lambda s: a[s].sum(axis=0), a.shape[0], workers))


def path_mean(a: np.ndarray, axis: int = 0, workers: Optional[int] = None) -> np.ndarray:
    n = np.shape(a)[axis]
    return path_sum(a, axis, workers) / n


# ---------------------------------------------------------------------------
# random streams


def stream(seed: int, purpose: str, n: int, j: int) -> np.random.Generator:
    """Independent generator for one (path, component) pair."""
    if not 0 <= seed < 2**64:
        raise InvalidArgument(f"seed must lie in [0, 2**64), got {seed}")
    if not 0 <= n < 2**40 or not 0 <= j < 2**16:
        raise InvalidArgument("path or component index out of range")
    key = (int(seed) << 64) | (PURPOSES[purpose] << 56) | (int(n) << 16) | int(j)
    return np.random.Generator(np.random.Philox(key=key))


def stream_normals(
    seed: int,
    purpose: str,
    n_paths: int,
    cols: int,
    length: int,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Standard normals of shape (length, n_paths, cols), one stream per (path, col)."""
    out = np.empty((length, n_paths, cols))

    def fill(s: slice) -> None:
        for n in range(s.start, s.stop):
            for j in range(cols):
                out[:, n, j] = stream(seed, purpose, n, j).standard_normal(length)

    map_chunks(fill, n_paths, workers)
    return out


def sample_gaussian(
    mean: Sequence[float],
    std: float,
    n_paths: int,
    seed: int,
    purpose: str,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Isotropic Gaussian samples (n_paths, d); exactly ``mean`` when std is 0."""
    mean = np.asarray(mean, dtype=float)
    out = np.broadcast_to(mean, (n_paths, mean.size)).copy()
    if std > 0:
        out += std * stream_normals(seed, purpose, n_paths, mean.size, 1, workers)[0]
    return out


# ---------------------------------------------------------------------------
# grids and Brownian paths


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        k = np.arange(self.steps + 1)
        t = self.horizon * k / self.steps
        t[-1] = self.horizon  # T * M / M can round away from T
        return t


def make_grid(T: float, M: int) -> TimeGrid:
    """Uniform grid on [0, T] with M steps."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon must be positive, got {T}")
    if int(M) != M or M < 1:
        raise InvalidArgument(f"step count must be a positive integer, got {M}")
    return TimeGrid(float(T), int(M))


@dataclass(frozen=True)
class BrownianBundle:
    grid: TimeGrid
    n_paths: int
    w_x: int
    w_y: int
    seed: int
    dBx: np.ndarray  # (M, N, w_x)
    dBy: np.ndarray  # (M, N, w_y)

    @property
    def increments(self) -> np.ndarray:
        """Stacked (ΔB^x, ΔB^y) of shape (M, N, w_x + w_y)."""
        return np.concatenate([self.dBx, self.dBy], axis=-1)

    @staticmethod
    def _cumulate(d: np.ndarray) -> np.ndarray:
        out = np.zeros((d.shape[0] + 1,) + d.shape[1:])
        np.cumsum(d, axis=0, out=out[1:])
        return out

    @property
    def Bx(self) -> np.ndarray:
        return self._cumulate(self.dBx)

    @property
    def By(self) -> np.ndarray:
        return self._cumulate(self.dBy)

    def coarsen(self, factor: int) -> "BrownianBundle":
        """Same paths on a grid with ``factor`` times fewer steps."""
        M = self.grid.steps
        if factor < 1 or M % factor:
            raise InvalidArgument(f"cannot coarsen {M} steps by {factor}")
        grid = make_grid(self.grid.horizon, M // factor)

        def agg(d: np.ndarray) -> np.ndarray:
            return d.reshape((M // factor, factor) + d.shape[1:]).sum(axis=1)

        return BrownianBundle(grid, self.n_paths, self.w_x, self.w_y, self.seed, agg(self.dBx), agg(self.dBy))


def sample_brownian(
    grid: TimeGrid,
    N: int,
    dims: tuple[int, int],
    seed: int,
    workers: Optional[int] = None,
) -> BrownianBundle:
    """Brownian increments; entry (k, n, j) depends only on (seed, n, k, j)."""
    if N < 1:
        raise InvalidArgument(f"need at least one path, got {N}")
    w_x, w_y = (int(v) for v in dims)
    if w_x < 0 or w_y < 0:
        raise InvalidArgument(f"noise dimensions must be >= 0, got {dims}")
    M, sq = grid.steps, np.sqrt(grid.dt)
    dBx = sq * stream_normals(seed, "brownian_x", N, w_x, M, workers)
    dBy = sq * stream_normals(seed, "brownian_y", N, w_y, M, workers)
    for a in (dBx, dBy):
        a.flags.writeable = False
    return BrownianBundle(grid, int(N), w_x, w_y, int(seed), dBx, dBy)


# ---------------------------------------------------------------------------
# empirical laws and ensembles


@dataclass(frozen=True)
class EmpiricalLaw:
    mean: np.ndarray
    second_moment: np.ndarray
    samples: Optional[np.ndarray] = None

    def recompute(self) -> "EmpiricalLaw":
        if self.samples is None:
            raise InvalidArgument("law was built without samples")
        return empirical_law(self.samples, keep_samples=True)


def empirical_law(slice_: np.ndarray, keep_samples: bool = False) -> EmpiricalLaw:
    """Mean and second moment of an (N, d) slice."""
    a = np.asarray(slice_, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise InvalidArgument("empirical law needs a non-empty (N, d) slice")
    n = a.shape[0]
    mean = path_sum(a) / n
    second = path_sum(np.einsum("ni,nj->nij", a, a)) / n
    return EmpiricalLaw(mean, second, a.copy() if keep_samples else None)


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Ensemble:
    """Particle paths on the grid; arrays have M+1 rows and N paths.

    ``Z`` has shape (M+1, N, d, w_x + w_y). Controls and ``Z`` are
    piecewise constant on [t_k, t_{k+1}); their last row holds the value at T.
    ``X`` and ``Ux`` are None when there is no ordinary crowd.
    """

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    Uy: np.ndarray
    X: Optional[np.ndarray] = None
    Ux: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        rows = self.grid.steps + 1
        for name in ("Y", "Z", "Uy", "X", "Ux"):
            a = _frozen(getattr(self, name))
            if a is not None:
                if a.shape[0] != rows or a.shape[1] != self.Y.shape[1]:
                    raise InvalidArgument(f"{name} has shape {a.shape}, expected ({rows}, N, ...)")
            object.__setattr__(self, name, a)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[1]

    @property
    def dim(self) -> int:
        return self.Y.shape[2]

    def positions(self, which: str) -> np.ndarray:
        if which == "tagged":
            return self.Y
        if which == "ordinary":
            if self.X is None:
                raise InvalidArgument("ensemble has no ordinary crowd")
            return self.X
        raise InvalidArgument(f"unknown crowd {which!r}")

    def is_finite(self) -> bool:
        arrays = [a for a in (self.X, self.Y, self.Z, self.Ux, self.Uy) if a is not None]
        return all(np.isfinite(a).all() for a in arrays)


@dataclass(frozen=True)
class AdjointEnsemble:
    """Adjoint paths (M+1, N, d) and their integrands (M+1, N, d, w).

    For a crowd-only control problem just ``pyy`` is set, and its integrand
    ``qyy`` is identically zero.
    """

    pyy: np.ndarray
    qyy: np.ndarray
    pxx: Optional[np.ndarray] = None
    pxy: Optional[np.ndarray] = None
    pyx: Optional[np.ndarray] = None
    qxx: Optional[np.ndarray] = None
    qxy: Optional[np.ndarray] = None
    qyx: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        for name in ("pyy", "qyy", "pxx", "pxy", "pyx", "qxx", "qxy", "qyx"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))


def distance_to_mean_samples(positions: np.ndarray) -> np.ndarray:
    """Per-path distance ‖pos − mean‖ at every grid point, shape (M+1, N)."""
    pos = np.asarray(positions, dtype=float)
    mean = path_mean(pos, axis=1)
    return np.linalg.norm(pos - mean[:, None, :], axis=-1)


def distance_to_mean_series(ens: Ensemble, which: str = "tagged") -> np.ndarray:
    """Mean distance to the crowd mean, one value per grid point."""
    return path_mean(distance_to_mean_samples(ens.positions(which)), axis=1)


@dataclass(frozen=True)
class Samples:
    """Per-path boundary data: preferred start y0, terminal point yT, start x0."""

    y0: np.ndarray
    yT: np.ndarray
    x0: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SolveResult:
    spec: object
    solver: str
    ensemble: Ensemble
    adjoints: AdjointEnsemble
    samples: Samples
    bundle: BrownianBundle
    converged: bool
    diagnostics: dict

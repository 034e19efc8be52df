"""Market data types, the variance-based time grid and GBM path simulation.

The forward process is geometric Brownian motion

    dX_t = b X_t dt + sigma X_t dW_t

simulated either with the multiplicative Euler step (used by the BSDE
solver) or sampled exactly at maturity (used by the Monte-Carlo oracle).

Random numbers come from counter-based Philox streams keyed by
``(seed, block index)`` where a block is a fixed run of ``PATH_BLOCK``
consecutive paths.  A batch is therefore reproducible bit for bit and
independent of how blocks are distributed over workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "MarketCase",
    "TimeGrid",
    "PathBatch",
    "PATH_BLOCK",
    "MIN_STEPS",
    "VARIANCE_PER_STEP",
    "build_time_grid",
    "simulate_paths",
    "sample_terminal_exact",
    "generator",
    "block_normals",
]

MIN_STEPS = 80
VARIANCE_PER_STEP = 0.025
PATH_BLOCK = 8192


@dataclass(frozen=True)
class MarketCase:
    """One up-and-out call pricing problem under constant coefficients."""

    spot: float
    strike: float
    barrier: float
    maturity: float
    rate: float = 0.0
    drift: float = 0.0
    volatility: float = 0.4

    def __post_init__(self):
        for name in ("spot", "strike", "barrier", "maturity", "volatility"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        for name in ("rate", "drift"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def knocked_out(self) -> bool:
        """True when the spot already sits at or above the barrier."""
        return self.spot >= self.barrier

    @property
    def total_variance(self) -> float:
        return self.volatility**2 * self.maturity

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "MarketCase":
        keys = ("spot", "strike", "barrier", "maturity", "rate", "drift", "volatility")
        missing = [k for k in keys if k not in data]
        if missing:
            raise ValueError(f"market case is missing keys: {missing}")
        unknown = sorted(set(data) - set(keys))
        if unknown:
            raise ValueError(f"unknown market case keys: {unknown}")
        values = {}
        for k in keys:
            v = data[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError(f"{k} must be a number, got {v!r}")
            values[k] = float(v)
        return cls(**values)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MarketCase":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    maturity: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.maturity > 0:
            raise ValueError("maturity must be > 0")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1, dtype=np.float64) * self.dt
        t[-1] = self.maturity
        return t

    def refine(self, substeps: int) -> "TimeGrid":
        """Split every step into ``substeps`` equal pieces."""
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        return TimeGrid(self.n_steps * substeps, self.maturity)


@dataclass
class PathBatch:
    """Simulated paths ``values`` (batch, n_steps + 1) and increments (batch, n_steps)."""

    values: np.ndarray
    increments: np.ndarray
    seed: int
    grid: TimeGrid = field(repr=False)

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


def build_time_grid(case: MarketCase) -> TimeGrid:
    """Number of steps from total variance: ``max(80, ceil(sigma^2 T / 0.025))``."""
    # round() guards against 3.2000000000000006-style noise before the ceiling
    ratio = round(case.total_variance / VARIANCE_PER_STEP, 9)
    return TimeGrid(max(MIN_STEPS, math.ceil(ratio)), case.maturity)


def generator(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and any number of counters."""
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and keys must be non-negative integers")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def block_normals(seed: int, stream: int, n_rows: int, n_cols: int, start_row: int = 0) -> np.ndarray:
    """Standard normals for rows ``start_row .. start_row + n_rows``.

    Row ``p`` of stream ``stream`` is always the same numbers, whichever
    slice it is requested in, as long as slices are block aligned.
    """
    if start_row % PATH_BLOCK:
        raise ValueError("start_row must be a multiple of PATH_BLOCK")
    out = np.empty((n_rows, n_cols))
    first = start_row // PATH_BLOCK
    for j, lo in enumerate(range(0, n_rows, PATH_BLOCK)):
        hi = min(lo + PATH_BLOCK, n_rows)
        g = generator(seed, stream, first + j)
        out[lo:hi] = g.standard_normal((hi - lo, n_cols))
    return out


def simulate_paths(case: MarketCase, grid: TimeGrid, batch_size: int, seed: int,
                   stream: int = 0) -> PathBatch:
    """Euler paths ``X_{i+1} = X_i + b X_i dt + sigma X_i dW_i``.

    Negative values are possible for large ``sigma * dW`` and are kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    dw = block_normals(seed, stream, batch_size, grid.n_steps)
    dw *= math.sqrt(grid.dt)
    x = kernels.euler_gbm(case.spot, case.drift * grid.dt, case.volatility, dw)
    return PathBatch(values=x, increments=dw, seed=seed, grid=grid)


def sample_terminal_exact(case: MarketCase, batch_size: int, seed: int, stream: int = 1,
                          start: int = 0) -> np.ndarray:
    """Exact lognormal draws of ``X_T``.

    ``start`` selects a block-aligned offset into the stream so large
    samples can be produced chunk by chunk.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    zeta = block_normals(seed, stream, batch_size, 1, start_row=start)[:, 0]
    sig, t = case.volatility, case.maturity
    return case.spot * np.exp((case.drift - 0.5 * sig * sig) * t + sig * math.sqrt(t) * zeta)

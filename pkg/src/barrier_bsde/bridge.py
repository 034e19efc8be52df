"""Brownian-bridge barrier crossing probabilities and the bridge-weighted payoff.

For ``dX/X = b dt + sigma dW`` pinned at ``X_t`` and ``X_{t+dt}`` the
probability that the path stays below a level ``y`` above both endpoints is
``1 - xi(y)`` with

    xi(y) = exp(-2 ln(y/X_t) ln(y/X_{t+dt}) / (sigma^2 dt)).

The drift ``b`` drops out once both endpoints are fixed.  Folding this
survival weight into the call payoff turns the knock-out claim into a
European claim on ``X_T`` alone, which is what the BSDE solver trains on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_core import MarketCase

__all__ = [
    "BridgeQuery",
    "bridge_crossing_factor",
    "survival_probability_up",
    "survival_probability_down",
    "modified_payoff",
]


@dataclass(frozen=True)
class BridgeQuery:
    """Endpoints, level and variance budget ``sigma^2 dt``; scalars or broadcastable arrays."""

    x_left: float | np.ndarray
    x_right: float | np.ndarray
    level: float | np.ndarray
    var_dt: float | np.ndarray

    def __post_init__(self):
        for name in ("x_left", "x_right", "level", "var_dt"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(v > 0):
                raise ValueError(f"{name} must be strictly positive")


def _xi(q: BridgeQuery) -> np.ndarray:
    level = np.asarray(q.level, dtype=np.float64)
    a = np.log(level / q.x_left)
    c = np.log(level / q.x_right)
    return np.exp(-2.0 * a * c / q.var_dt)


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def bridge_crossing_factor(q: BridgeQuery):
    """``xi(level)`` exactly as written, no clamping."""
    return _out(_xi(q))


def survival_probability_up(q: BridgeQuery):
    """P(max of the bridge < level); zero if either endpoint is at or above the level."""
    below = (np.asarray(q.x_left) < q.level) & (np.asarray(q.x_right) < q.level)
    p = np.clip(1.0 - _xi(q), 0.0, 1.0)
    return _out(np.where(below, p, 0.0))


def survival_probability_down(q: BridgeQuery):
    """P(min of the bridge > level); mirror image of :func:`survival_probability_up`."""
    above = (np.asarray(q.x_left) > q.level) & (np.asarray(q.x_right) > q.level)
    p = np.clip(1.0 - _xi(q), 0.0, 1.0)
    return _out(np.where(above, p, 0.0))


def modified_payoff(case: MarketCase, x_terminal):
    """Call payoff times the full-horizon no-crossing probability.

    ``h(X) = (X - K)^+ 1{X < B} [1 - exp(-2 ln(B/x0) ln(B/X) / (sigma^2 T))]``

    Nonpositive terminal values (reachable by Euler paths) pay zero, as does
    every path when the spot is already at or above the barrier.
    """
    x = np.asarray(x_terminal, dtype=np.float64)
    out = np.zeros_like(x)
    if case.knocked_out or case.barrier <= case.strike:
        return _out(out)
    live = (x > case.strike) & (x < case.barrier)
    xl = x[live]
    var_t = case.volatility**2 * case.maturity
    xi = np.exp(-2.0 * np.log(case.barrier / case.spot) * np.log(case.barrier / xl) / var_t)
    out[live] = (xl - case.strike) * np.clip(1.0 - xi, 0.0, 1.0)
    return _out(out)

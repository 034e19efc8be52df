"""Monte-Carlo oracles for the continuously monitored up-and-out call.

Two unbiased estimators of the same expectation:

* ``terminal-bridge`` samples ``X_T`` exactly and averages the
  bridge-weighted payoff, i.e. the survival probability is integrated out
  analytically given the terminal value;
* ``path-bridge`` samples whole log-GBM paths exactly on a grid and weights
  each path by the product of per-step bridge survival probabilities.

Their agreement is the conditional-expectation identity
``E[f(X) | A] P(A) = E[f(X) P(A | X)]`` at work; :func:`lemma2_property_check`
exercises that identity on a finite model where it can be enumerated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels
from .analytic import PriceEstimate
from .bridge import modified_payoff
from .model_core import (
    PATH_BLOCK,
    MarketCase,
    TimeGrid,
    block_normals,
    build_time_grid,
    generator,
    sample_terminal_exact,
)

__all__ = [
    "McConfig",
    "price_terminal_bridge",
    "price_path_bridge",
    "Lemma2Report",
    "lemma2_property_check",
]

TERMINAL_CHUNK = 128 * PATH_BLOCK
PATH_CHUNK = 8 * PATH_BLOCK
_PATH_STREAM = 2


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 1_000_000
    seed: int = 0
    estimator: str = "terminal-bridge"
    substeps: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.estimator not in ("terminal-bridge", "path-bridge"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


class _Moments:
    """Streaming mean / M2 merge (Chan et al.) so chunking does not lose precision."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: np.ndarray):
        nb = x.size
        if nb == 0:
            return
        mb = float(np.mean(x))
        m2b = float(np.sum((x - mb) ** 2))
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n

    @property
    def std_error(self) -> float:
        if self.n < 2:
            return 0.0
        return math.sqrt(self.m2 / (self.n - 1) / self.n)


def price_terminal_bridge(case: MarketCase, cfg: McConfig) -> PriceEstimate:
    """Average of ``e^{-rT} h(X_T)`` over exact terminal draws."""
    diag = {"paths": cfg.n_paths, "seed": cfg.seed, "estimator": "terminal-bridge"}
    if case.barrier <= case.strike or case.knocked_out:
        return PriceEstimate(0.0, "mc-terminal", 0.0, diag)
    disc = math.exp(-case.rate * case.maturity)
    acc = _Moments()
    for start in range(0, cfg.n_paths, TERMINAL_CHUNK):
        n = min(TERMINAL_CHUNK, cfg.n_paths - start)
        x_t = sample_terminal_exact(case, n, cfg.seed, start=start)
        acc.add(disc * modified_payoff(case, x_t))
    return PriceEstimate(max(acc.mean, 0.0), "mc-terminal", acc.std_error, diag)


def price_path_bridge(case: MarketCase, grid: TimeGrid | None, cfg: McConfig) -> PriceEstimate:
    """Average of ``e^{-rT} (X_T - K)^+`` times the path's bridge survival weight.

    The grid (default: the variance rule) is refined by ``cfg.substeps``.
    """
    grid = build_time_grid(case) if grid is None else grid
    fine = grid.refine(cfg.substeps)
    diag = {"paths": cfg.n_paths, "seed": cfg.seed, "estimator": "path-bridge",
            "steps": fine.n_steps}
    if case.barrier <= case.strike or case.knocked_out:
        return PriceEstimate(0.0, "mc-path", 0.0, diag)
    sig, dt = case.volatility, fine.dt
    mu_dt = (case.drift - 0.5 * sig * sig) * dt
    disc = math.exp(-case.rate * case.maturity)
    acc = _Moments()
    for start in range(0, cfg.n_paths, PATH_CHUNK):
        n = min(PATH_CHUNK, cfg.n_paths - start)
        z = block_normals(cfg.seed, _PATH_STREAM, n, fine.n_steps, start_row=start)
        x_t, weight = kernels.bridge_path_weights(
            z, math.log(case.spot), mu_dt, sig * math.sqrt(dt), math.log(case.barrier), sig * sig * dt)
        acc.add(disc * np.maximum(x_t - case.strike, 0.0) * weight)
    return PriceEstimate(max(acc.mean, 0.0), "mc-path", acc.std_error, diag)


@dataclass(frozen=True)
class Lemma2Report:
    exact_lhs: Fraction
    exact_rhs: Fraction
    sim_lhs: float
    sim_rhs: float
    sim_diff_se: float
    sim_lhs_se: float
    sim_rhs_se: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "exact_lhs": float(self.exact_lhs),
            "exact_rhs": float(self.exact_rhs),
            "sim_lhs": self.sim_lhs,
            "sim_rhs": self.sim_rhs,
            "sim_diff_se": self.sim_diff_se,
            "passed": self.passed,
        }


def lemma2_property_check(sample_size: int = 100_000, seed: int = 0, f=None, p_given=None) -> Lemma2Report:
    """Check ``E[f(X)|A] P(A) = E[f(X) P(A|X)]`` on a die-and-coin model.

    ``X`` is uniform on 1..6 and ``A`` is a coin landing heads with
    probability ``p_given(X)`` (default ``k/10``); ``f`` defaults to ``k^2``.
    Both sides are enumerated exactly with rationals and estimated by
    simulation; the simulated sides must agree with each other and with the
    exact value within 4 standard errors.
    """
    if sample_size < 10_000:
        raise ValueError("sample_size must be >= 10_000")
    f = (lambda k: k * k) if f is None else f
    p_given = (lambda k: Fraction(k, 10)) if p_given is None else p_given
    faces = range(1, 7)
    p_face = Fraction(1, 6)

    # left side: enumerate the joint outcomes (face, coin) and condition on heads
    p_a = sum(p_face * Fraction(p_given(k)) for k in faces)
    joint_heads = sum(p_face * Fraction(p_given(k)) * Fraction(f(k)) for k in faces)
    exact_lhs = (joint_heads / p_a) * p_a if p_a else Fraction(0)
    exact_rhs = sum(p_face * Fraction(f(k)) * Fraction(p_given(k)) for k in faces)

    rng = generator(seed, 7)
    x = rng.integers(1, 7, size=sample_size)
    fx = np.array([float(f(k)) for k in range(7)])[x]
    px = np.array([0.0] + [float(p_given(k)) for k in faces])[x]
    heads = rng.random(sample_size) < px
    n_heads = int(heads.sum())
    # E[f|A] estimated on the heads subsample, P(A) by the heads fraction
    sim_lhs = (fx[heads].mean() if n_heads else 0.0) * n_heads / sample_size
    sim_rhs = float(np.mean(fx * px))
    lhs_terms = fx * heads
    rhs_terms = fx * px
    n = sample_size
    lhs_se = float(np.std(lhs_terms, ddof=1) / math.sqrt(n))
    rhs_se = float(np.std(rhs_terms, ddof=1) / math.sqrt(n))
    diff_se = float(np.std(lhs_terms - rhs_terms, ddof=1) / math.sqrt(n))

    def within(a, b, se):
        return abs(a - b) <= 4.0 * se if se > 0 else abs(a - b) <= 1e-12 * max(1.0, abs(b))

    passed = (
        exact_lhs == exact_rhs
        and within(sim_lhs, sim_rhs, diff_se)
        and within(sim_lhs, float(exact_lhs), lhs_se)
        and within(sim_rhs, float(exact_rhs), rhs_se)
    )
    return Lemma2Report(exact_lhs, exact_rhs, float(sim_lhs), sim_rhs, diff_se, lhs_se, rhs_se, passed)

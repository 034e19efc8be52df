import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrier_bsde.bridge import (
    BridgeQuery,
    bridge_crossing_factor,
    modified_payoff,
    survival_probability_down,
    survival_probability_up,
)
from barrier_bsde.model_core import MarketCase, generator

# discrete-monitoring shift for a continuous maximum (Broadie-Glasserman constant)
BG_BETA = 0.5826


def bridge_max_exceeds(x_left, x_right, level, vol, dt, n_paths, substeps, seed, chunk=2000):
    """Fraction of fine-grid log-bridge paths whose maximum reaches ``level``."""
    rng = generator(seed, 55)
    a, b = math.log(x_left), math.log(x_right)
    h = dt / substeps
    frac = np.arange(1, substeps + 1) / substeps
    # shift the level down to undo the bias of monitoring only at grid points
    lvl = math.log(level) - BG_BETA * vol * math.sqrt(h)
    hits = 0
    for lo in range(0, n_paths, chunk):
        n = min(chunk, n_paths - lo)
        w = np.cumsum(rng.standard_normal((n, substeps)) * math.sqrt(h), axis=1)
        path = a + (b - a) * frac + vol * (w - frac * w[:, -1:])
        hits += int(np.count_nonzero(path.max(axis=1) >= lvl))
    return hits / n_paths


def q(xl=20.0, xr=25.0, y=40.0, vol=0.4, dt=0.5):
    return BridgeQuery(xl, xr, y, vol * vol * dt)


def test_xi_left_endpoint_on_level():
    assert bridge_crossing_factor(q(xl=40.0)) == 1.0


def test_xi_far_level_vanishes():
    assert bridge_crossing_factor(q(y=1e8)) < 1e-300


def test_xi_reference_value():
    expect = math.exp(-2 * math.log(2) * math.log(1.6) / 0.08)
    assert bridge_crossing_factor(q()) == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(2.9e-4, rel=0.05)


def test_xi_unclamped_beyond_level():
    # one endpoint above the level: the raw formula exceeds 1
    assert bridge_crossing_factor(q(xr=45.0)) > 1.0


@pytest.mark.parametrize("bad", [dict(xl=0.0), dict(xr=-1.0), dict(y=0.0), dict(vol=0.0)])
def test_query_domain(bad):
    with pytest.raises(ValueError):
        q(**bad)


def test_survival_endpoint_at_or_above_level():
    assert survival_probability_up(q(xl=40.0)) == 0.0
    assert survival_probability_up(q(xr=41.0)) == 0.0


def test_survival_far_level_is_one():
    assert survival_probability_up(q(y=1e8)) == 1.0


def test_survival_reference_value():
    assert survival_probability_up(q()) == pytest.approx(1 - 2.9e-4, abs=2e-5)


def test_survival_down_mirror():
    qd = BridgeQuery(25.0, 20.0, 12.5, 0.08)
    expect = 1 - math.exp(-2 * math.log(12.5 / 25) * math.log(12.5 / 20) / 0.08)
    assert survival_probability_down(qd) == pytest.approx(expect, rel=1e-14)
    assert survival_probability_down(BridgeQuery(25.0, 10.0, 12.5, 0.08)) == 0.0


def test_vectorized_queries():
    xr = np.array([25.0, 39.0, 45.0])
    out = survival_probability_up(BridgeQuery(20.0, xr, 40.0, 0.08))
    assert out.shape == (3,) and out[2] == 0.0
    assert out[0] > out[1] > 0


@settings(max_examples=60, deadline=None)
@given(st.floats(1.0, 100.0), st.floats(1.0, 100.0), st.floats(1.0, 300.0), st.floats(0.01, 3.0))
def test_xi_symmetric(a, b, y, v):
    assert bridge_crossing_factor(BridgeQuery(a, b, y, v)) == pytest.approx(
        bridge_crossing_factor(BridgeQuery(b, a, y, v)), rel=1e-12, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(st.floats(1.0, 100.0), st.floats(1.0, 100.0), st.floats(1.0, 300.0), st.floats(0.01, 3.0))
def test_survival_in_unit_interval(a, b, y, v):
    p = survival_probability_up(BridgeQuery(a, b, y, v))
    assert 0.0 <= p <= 1.0


def test_reference_crossing_matches_fine_bridge():
    xi = bridge_crossing_factor(q())
    n = 400_000
    p = bridge_max_exceeds(20.0, 25.0, 40.0, 0.4, 0.5, n, 500, seed=1)
    se = math.sqrt(xi * (1 - xi) / n)
    assert abs(p - xi) <= 4 * se, (p, xi, se)


def test_survival_matches_fine_bridge_on_random_tuples():
    rng = np.random.default_rng(2024)
    n = 4000
    for k in range(20):
        vol = rng.uniform(0.2, 1.2)
        dt = rng.uniform(0.05, 1.0)
        level = 100.0
        # endpoints within about one standard deviation of the level
        s = vol * math.sqrt(dt)
        xl = level * math.exp(-rng.uniform(0.1, 1.2) * s)
        xr = level * math.exp(-rng.uniform(0.1, 1.2) * s)
        p_surv = survival_probability_up(BridgeQuery(xl, xr, level, vol * vol * dt))
        p_mc = 1.0 - bridge_max_exceeds(xl, xr, level, vol, dt, n, 1000, seed=100 + k)
        se = math.sqrt(max(p_surv * (1 - p_surv), 1e-4) / n)
        assert abs(p_mc - p_surv) <= 4 * se, (k, p_mc, p_surv)


CASE = MarketCase(spot=22.0, strike=23.0, barrier=40.0, maturity=0.5, volatility=0.4)


def test_payoff_inside_band():
    h = modified_payoff(CASE, 30.0)
    assert 0.0 < h < 7.0
    expect = 7 * (1 - math.exp(-2 * math.log(40 / 22) * math.log(40 / 30) / 0.08))
    assert h == pytest.approx(expect, rel=1e-14)


def test_payoff_reference_survival_by_fine_bridge():
    # the survival factor in the payoff is the bridge from spot to X_T over the full horizon
    surv = modified_payoff(CASE, 30.0) / 7.0
    n = 20_000
    p_mc = 1.0 - bridge_max_exceeds(22.0, 30.0, 40.0, 0.4, 0.5, n, 1000, seed=3)
    assert abs(p_mc - surv) <= 4 * math.sqrt(surv * (1 - surv) / n)


@pytest.mark.parametrize("x", [45.0, 40.0, 23.0, 10.0, 0.0, -3.0])
def test_payoff_zero_outside_band(x):
    assert modified_payoff(CASE, x) == 0.0


def test_payoff_knocked_out_or_empty_band():
    assert modified_payoff(MarketCase(spot=41.0, strike=23.0, barrier=40.0, maturity=0.5), 30.0) == 0.0
    assert modified_payoff(MarketCase(spot=22.0, strike=23.0, barrier=23.0, maturity=0.5), 30.0) == 0.0


def test_payoff_continuous_at_barrier():
    assert modified_payoff(CASE, 40.0 * (1 - 1e-10)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(-10.0, 200.0, allow_nan=False))
def test_payoff_bounds(x):
    h = modified_payoff(CASE, x)
    assert 0.0 <= h <= max(x - CASE.strike, 0.0)


def test_payoff_vectorized():
    x = np.linspace(-5, 50, 200)
    out = modified_payoff(CASE, x)
    assert out.shape == x.shape
    assert np.array_equal(out, [modified_payoff(CASE, float(v)) for v in x])

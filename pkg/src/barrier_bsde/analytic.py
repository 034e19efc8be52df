"""Closed-form benchmark prices under constant coefficients.

The up-and-out call is obtained from the joint law of the terminal value and
running maximum of ``Y_t = ln(X_t / x0) = mu t + sigma W_t``,
``mu = b - sigma^2 / 2``.  By reflection, for ``y < h = ln(B / x0)``

    P(Y_T in dy, max Y < h) = [n(y; mu T, s) - exp(2 mu h / sigma^2) n(y; 2h + mu T, s)] dy

with ``s = sigma sqrt(T)`` and ``n(.; m, s)`` the normal density.  Each term
integrates against ``x0 e^y - K`` over ``(ln(K/x0), h)`` in closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from scipy import integrate
from scipy.special import ndtr

from .bridge import modified_payoff
from .model_core import MarketCase

__all__ = [
    "PriceEstimate",
    "METHODS",
    "bs_vanilla_call",
    "up_out_call",
    "up_out_call_quadrature",
]

METHODS = ("analytic", "mc-terminal", "mc-path", "bsde")


@dataclass
class PriceEstimate:
    value: float
    method: str
    std_error: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.std_error >= 0:
            raise ValueError("std_error must be >= 0")
        if self.method == "analytic" and self.std_error != 0:
            raise ValueError("analytic prices carry no standard error")
        # a learned Y0 may sit a hair below zero when the true price is 0
        if self.method != "bsde" and self.value < 0:
            raise ValueError("price must be >= 0")

    def to_dict(self) -> dict:
        return {
            "value": float(self.value),
            "method": self.method,
            "std_error": float(self.std_error),
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PriceEstimate":
        return cls(float(data["value"]), data["method"], float(data.get("std_error", 0.0)),
                   dict(data.get("diagnostics", {})))

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _interval_call(x0: float, strike: float, m: float, s: float, lo: float, hi: float) -> float:
    """Integral of ``(x0 e^y - K) n(y; m, s)`` over ``lo < y < hi``."""
    a, c = (lo - m) / s, (hi - m) / s
    stock = x0 * math.exp(m + 0.5 * s * s) * (ndtr(c - s) - ndtr(a - s))
    cash = strike * (ndtr(c) - ndtr(a))
    return stock - cash


def bs_vanilla_call(case: MarketCase) -> PriceEstimate:
    """``e^{-rT} E[(X_T - K)^+]`` with ``X`` drifting at ``b``."""
    x0, k, t, sig = case.spot, case.strike, case.maturity, case.volatility
    s = sig * math.sqrt(t)
    d1 = (math.log(x0 / k) + (case.drift + 0.5 * sig * sig) * t) / s
    d2 = d1 - s
    value = math.exp(-case.rate * t) * (x0 * math.exp(case.drift * t) * ndtr(d1) - k * ndtr(d2))
    return PriceEstimate(max(float(value), 0.0), "analytic")


def up_out_call(case: MarketCase) -> PriceEstimate:
    """Continuously monitored up-and-out call by the reflection principle."""
    if case.barrier <= case.strike or case.knocked_out:
        return PriceEstimate(0.0, "analytic")
    x0, sig, t = case.spot, case.volatility, case.maturity
    mu = case.drift - 0.5 * sig * sig
    s = sig * math.sqrt(t)
    h = math.log(case.barrier / x0)
    k = math.log(case.strike / x0)
    direct = _interval_call(x0, case.strike, mu * t, s, k, h)
    image = _interval_call(x0, case.strike, 2.0 * h + mu * t, s, k, h)
    value = math.exp(-case.rate * t) * (direct - math.exp(2.0 * mu * h / (sig * sig)) * image)
    return PriceEstimate(max(float(value), 0.0), "analytic")


def up_out_call_quadrature(case: MarketCase, epsrel: float = 1e-12) -> float:
    """Bridge-weighted payoff integrated against the lognormal terminal density.

    Works in ``y = ln(X_T / x0)`` so the integrand is smooth on ``(ln K/x0, ln B/x0)``.
    """
    if case.barrier <= case.strike or case.knocked_out:
        return 0.0
    x0, sig, t = case.spot, case.volatility, case.maturity
    m = (case.drift - 0.5 * sig * sig) * t
    s = sig * math.sqrt(t)
    lo, hi = math.log(case.strike / x0), math.log(case.barrier / x0)

    def integrand(y):
        dens = math.exp(-0.5 * ((y - m) / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
        return modified_payoff(case, x0 * math.exp(y)) * dens

    # split at the density mode when it falls inside the interval
    points = [m] if lo < m < hi else None
    value, _ = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=epsrel, limit=500, points=points)
    return math.exp(-case.rate * t) * value

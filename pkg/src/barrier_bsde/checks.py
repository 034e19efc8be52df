"""Property suites behind ``barrier-bsde check``.

Each suite returns a list of :class:`CheckResult`; a suite passes when every
entry does.  The gradient checks compare backprop against central finite
differences and measure the error per parameter array as
``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`` where
``floor`` is ``1e-6`` times the largest gradient entry of the whole model.
The floor keeps arrays whose exact gradient is zero (the hidden bias right
before a batch-norm layer) from dividing rounding noise by zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .analytic import bs_vanilla_call, up_out_call, up_out_call_quadrature
from .model_core import MarketCase, TimeGrid, generator, simulate_paths
from .montecarlo import McConfig, lemma2_property_check, price_path_bridge, price_terminal_bridge
from .nn import BN_MODES, NetworkSpec, backward, batchnorm_backward, batchnorm_forward, forward_steps, init_network
from .solver import loss_and_grads, network_spec_for

__all__ = [
    "CheckResult",
    "SUITES",
    "fd_relative_errors",
    "layer_gradient_check",
    "batchnorm_gradient_check",
    "end_to_end_gradient_check",
    "run_suite",
]

FD_STEP = 1e-5
LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3
GRAD_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}" + (f": {self.detail}" if self.detail else "")


def _numeric_grad(fn, params: dict, key: str, h: float = FD_STEP) -> np.ndarray:
    p = params[key]
    out = np.zeros(p.shape)
    flat = p.reshape(-1)  # view: perturbations write through to params[key]
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2.0 * h)
    return out


def fd_relative_errors(fn, params: dict, grads: dict, keys=None, h: float = FD_STEP) -> dict[str, float]:
    """Per-array relative error between ``grads`` and finite differences of ``fn``.

    ``fn`` takes no arguments and reads the (mutated in place) ``params``.
    """
    keys = sorted(grads) if keys is None else keys
    numeric = {k: _numeric_grad(fn, params, k, h) for k in keys}
    scale = max(max(float(np.max(np.abs(grads[k]))), float(np.max(np.abs(numeric[k])))) for k in keys)
    floor = max(1e-6 * scale, 1e-300)
    errs = {}
    for k in keys:
        a, n = np.asarray(grads[k], dtype=np.float64), numeric[k]
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
        errs[k] = float(np.max(np.abs(a - n))) / denom
    return errs


def layer_gradient_check(bn_mode: str, seed: int, fused: bool = False, steps: int = 3, batch: int = 8,
                         width: int = 21) -> dict[str, float]:
    """Network-level check: loss ``sum(c * Z)`` with random weights ``c``."""
    rng = generator(seed, 101)
    spec = NetworkSpec(hidden_width=width, bn_mode=bn_mode, n_time_steps=steps)
    net = init_network(spec, rng)
    # nontrivial BN scale/shift so their gradients are exercised
    for j in spec.bn_layers:
        net.params[f"gamma{j}"] += 0.3 * rng.standard_normal(net.params[f"gamma{j}"].shape)
        net.params[f"beta{j}"] += 0.3 * rng.standard_normal(net.params[f"beta{j}"].shape)
        net.running[f"mean{j}"] += rng.standard_normal(net.running[f"mean{j}"].shape)
    for key in [k for k in net.params if k.startswith("b") and not k.startswith("beta")]:
        net.params[key] += 0.1 * rng.standard_normal(net.params[key].shape)
    x = np.stack([rng.uniform(5.0, 40.0, (steps, batch)), rng.uniform(0.0, 2.0, (steps, batch))], axis=-1)
    c = rng.standard_normal((steps, batch))
    idx = np.arange(steps)

    def f():
        z, _ = forward_steps(net, spec, idx, x, training=True, fused=fused)
        return float(np.sum(c * z))

    _, cache = forward_steps(net, spec, idx, x, training=True, fused=fused)
    grads, _ = backward(net, spec, cache, c)
    return fd_relative_errors(f, net.params, grads)


def batchnorm_gradient_check(seed: int, rows: int = 8, cols: int = 4) -> dict[str, float]:
    """Standalone batch-norm layer on a random ``rows x cols`` batch."""
    rng = generator(seed, 102)
    p = {"x": rng.standard_normal((rows, cols)) * 3.0 + 1.0,
         "gamma": 1.0 + 0.5 * rng.standard_normal(cols),
         "beta": rng.standard_normal(cols)}
    c = rng.standard_normal((rows, cols))

    def f():
        out, _ = batchnorm_forward(p["x"], p["gamma"], p["beta"], mode="train")
        return float(np.sum(c * out))

    _, cache = batchnorm_forward(p["x"], p["gamma"], p["beta"], mode="train")
    dx, dgamma, dbeta = batchnorm_backward(c, cache)
    return fd_relative_errors(f, p, {"x": dx, "gamma": dgamma, "beta": dbeta})


def end_to_end_gradient_check(bn_mode: str, seed: int, n_steps: int = 5, batch: int = 4,
                              width: int = 4) -> dict[str, float]:
    """Full unrolled loss on a tiny problem, every trainable parameter."""
    case = MarketCase(spot=22.0, strike=23.0, barrier=40.0, maturity=0.5, volatility=0.4, rate=0.03)
    grid = TimeGrid(n_steps, case.maturity)
    spec = network_spec_for(grid, bn_mode, hidden_width=width)
    rng = generator(seed, 103)
    net = init_network(spec, rng, y0_high=3.0)
    for key in [k for k in net.params if k.startswith("b") and not k.startswith("beta")]:
        net.params[key] += 0.1 * rng.standard_normal(net.params[key].shape)
    paths = simulate_paths(case, grid, batch, seed, stream=104)

    def f():
        value, _, _ = loss_and_grads(case, grid, paths, net, spec)
        return value

    _, grads, _ = loss_and_grads(case, grid, paths, net, spec)
    return fd_relative_errors(f, net.params, grads)


def _grad_results(kind: str, errs: dict[str, float], tol: float) -> CheckResult:
    worst = max(errs, key=errs.get)
    return CheckResult(kind, errs[worst] <= tol, f"max rel err {errs[worst]:.2e} ({worst}), tol {tol:g}")


def suite_gradients(seeds=GRAD_SEEDS) -> list[CheckResult]:
    out = []
    fused_opts = (False, True) if kernels.mlp1_forward is not None else (False,)
    for mode in BN_MODES:
        for seed in seeds:
            for fused in fused_opts:
                tag = "compiled" if fused else "numpy"
                out.append(_grad_results(f"layer {mode} seed={seed} {tag}",
                                         layer_gradient_check(mode, seed, fused=fused), LAYER_TOL))
            out.append(_grad_results(f"end-to-end {mode} seed={seed}",
                                     end_to_end_gradient_check(mode, seed), END_TO_END_TOL))
    for seed in seeds:
        out.append(_grad_results(f"batchnorm 8x4 seed={seed}", batchnorm_gradient_check(seed), LAYER_TOL))
    return out


def suite_estimators(n_paths: int = 200_000, seed: int = 0) -> list[CheckResult]:
    out = []
    cases = [
        MarketCase(spot=22.0, strike=23.0, barrier=40.0, maturity=0.5, volatility=0.4),
        MarketCase(spot=27.0, strike=23.0, barrier=60.0, maturity=2.0, volatility=0.8),
        MarketCase(spot=17.0, strike=23.0, barrier=100.0, maturity=0.5, volatility=1.2),
    ]
    for case in cases:
        cfg = McConfig(n_paths=n_paths, seed=seed)
        term = price_terminal_bridge(case, cfg)
        path = price_path_bridge(case, None, cfg)
        exact = up_out_call(case).value
        se = math.hypot(term.std_error, path.std_error)
        tag = f"S={case.spot:g} B={case.barrier:g} T={case.maturity:g} vol={case.volatility:g}"
        out.append(CheckResult(f"terminal vs path {tag}", abs(term.value - path.value) <= 3 * se,
                               f"{term.value:.5f} vs {path.value:.5f}, 3SE={3 * se:.5f}"))
        out.append(CheckResult(f"terminal vs closed form {tag}", abs(term.value - exact) <= 3 * term.std_error,
                               f"{term.value:.5f} vs {exact:.5f}, 3SE={3 * term.std_error:.5f}"))
    case = MarketCase(spot=22.0, strike=23.0, barrier=40.0, maturity=0.5, volatility=0.4)
    grid = TimeGrid(80, case.maturity)
    xt = simulate_paths(case, grid, 100_000, seed, stream=5).terminal
    se = float(np.std(xt, ddof=1) / math.sqrt(xt.size))
    out.append(CheckResult("Euler martingale mean", abs(xt.mean() - case.spot) <= 4 * se,
                           f"mean {xt.mean():.5f}, 4SE={4 * se:.5f}"))
    return out


def suite_analytic() -> list[CheckResult]:
    out = []
    base = [
        MarketCase(spot=s, strike=23.0, barrier=b, maturity=t, volatility=v)
        for s, b, t, v in [(22, 40, 0.5, 0.4), (17, 100, 2.0, 1.2), (32, 60, 0.5, 0.8), (27, 100, 2.0, 0.4)]
    ] + [MarketCase(spot=22.0, strike=23.0, barrier=40.0, maturity=1.0, volatility=0.3, rate=0.05, drift=0.02)]
    for case in base:
        cf, q, van = up_out_call(case).value, up_out_call_quadrature(case), bs_vanilla_call(case).value
        tag = f"S={case.spot:g} B={case.barrier:g} T={case.maturity:g} vol={case.volatility:g} r={case.rate:g}"
        rel = abs(cf - q) / max(abs(q), 1e-300)
        out.append(CheckResult(f"closed form vs quadrature {tag}", rel <= 1e-6, f"rel {rel:.1e}"))
        out.append(CheckResult(f"0 <= up-out <= vanilla {tag}", 0.0 <= cf <= van + 1e-12, f"{cf:.6f} <= {van:.6f}"))
        sweep = np.linspace(case.spot * 1.01, case.barrier * 3.0, 12)
        vals = [up_out_call(MarketCase(**{**case.to_dict(), "barrier": float(b)})).value for b in sweep]
        out.append(CheckResult(f"monotone in barrier {tag}", bool(np.all(np.diff(vals) >= -1e-12))))
        far = MarketCase(**{**case.to_dict(), "barrier": 1e6 * case.spot})
        rel = abs(up_out_call(far).value - van) / van
        out.append(CheckResult(f"far barrier -> vanilla {tag}", rel <= 1e-8, f"rel {rel:.1e}"))
    low = MarketCase(spot=22.0, strike=23.0, barrier=23.0, maturity=0.5, volatility=0.4)
    out.append(CheckResult("barrier <= strike prices to 0", up_out_call(low).value == 0.0))
    return out


def suite_lemma2(sample_size: int = 100_000, seed: int = 0) -> list[CheckResult]:
    rep = lemma2_property_check(sample_size, seed)
    return [
        CheckResult("exact enumeration", rep.exact_lhs == rep.exact_rhs,
                    f"{rep.exact_lhs} = {rep.exact_rhs} ({float(rep.exact_lhs):g})"),
        CheckResult("simulation", rep.passed, f"{rep.sim_lhs:.4f} vs {rep.sim_rhs:.4f}"),
    ]


SUITES = {
    "gradients": suite_gradients,
    "estimators": suite_estimators,
    "analytic": suite_analytic,
    "lemma2": suite_lemma2,
}


def run_suite(name: str) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()

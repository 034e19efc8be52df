"""Deep-BSDE training loop for the bridge-weighted barrier payoff.

Forward process (Euler):   X_{i+1} = X_i + b X_i dt + sigma X_i dW_i
Value process (Euler):     Y_{i+1} = Y_i + r Y_i dt + Z_i dW_i

``Y_0`` and ``Z_0`` are free scalars; ``Z_i`` for ``i >= 1`` comes from the
shared network evaluated at ``(X_i, T - t_i)``.  The loss is the mean squared
mismatch between ``Y_T`` and the bridge-weighted payoff ``h(X_T)``, and its
minimizer in ``Y_0`` is the option price.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .bridge import modified_payoff
from .model_core import MarketCase, PathBatch, TimeGrid, build_time_grid, generator, simulate_paths
from .nn import Network, NetworkSpec, adam_init, adam_step, backward, forward_steps, init_network, update_running_stats

__all__ = [
    "SETTINGS",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "network_spec_for",
    "roll_forward",
    "loss",
    "loss_and_grads",
    "train",
]

STOP_WINDOW = 50
_TRAIN_STREAM = 16
_INIT_STREAM = 3

SETTINGS = {
    "test1": dict(initial_lr=0.01, lr_decay_factor=0.5, lr_decay_every=1500, max_iterations=8000,
                  min_iterations=8000, stop_threshold=0.0, batch_size=512, bn_mode="none"),
    "test2": dict(initial_lr=0.02, lr_decay_factor=0.5, lr_decay_every=500, max_iterations=1500,
                  min_iterations=750, stop_threshold=0.002, batch_size=512, bn_mode="every-layer"),
    "test3": dict(initial_lr=0.02, lr_decay_factor=0.5, lr_decay_every=1000, max_iterations=3000,
                  min_iterations=1500, stop_threshold=0.005, batch_size=512, bn_mode="input-only"),
}


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    setting: str = "custom"
    initial_lr: float = 0.02
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 500
    max_iterations: int = 1500
    min_iterations: int = 750
    stop_threshold: float = 0.002
    batch_size: int = 512
    bn_mode: str = "every-layer"
    seed: int = 0
    hidden_width: int = 21
    hidden_layers: int = 1

    def __post_init__(self):
        if self.setting not in (*SETTINGS, "custom"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if not 1 <= self.min_iterations <= self.max_iterations:
            raise ValueError("need 1 <= min_iterations <= max_iterations")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.stop_threshold < 0 or (self.stop_threshold == 0 and self.setting != "test1"
                                       and self.min_iterations < self.max_iterations):
            raise ValueError("stop_threshold must be > 0 when early stopping is possible")
        if self.lr_decay_every < 1 or not self.initial_lr > 0:
            raise ValueError("learning-rate schedule must be positive")

    @classmethod
    def from_setting(cls, setting: str, **overrides) -> "TrainConfig":
        return cls(setting=setting, **{**SETTINGS[setting], **overrides})

    def lr_at(self, iteration: int) -> float:
        """Learning rate used at 0-based ``iteration``."""
        return self.initial_lr * self.lr_decay_factor ** (iteration // self.lr_decay_every)

    @property
    def stopping_enabled(self) -> bool:
        return self.stop_threshold > 0 and self.min_iterations < self.max_iterations


@dataclass
class TrainResult:
    price: float
    z0: float
    iterations_run: int
    loss_history: list
    price_history: list
    lr_history: list
    converged: bool
    wall_time: float
    network: Network | None = field(default=None, repr=False)
    spec: NetworkSpec | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "price": self.price,
            "z0": self.z0,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "loss_history": list(self.loss_history),
            "price_history": list(self.price_history),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "y0", "lr"])
            for i, (l, y, lr) in enumerate(zip(self.loss_history, self.price_history, self.lr_history)):
                w.writerow([i, repr(l), repr(y), repr(lr)])


def network_spec_for(grid: TimeGrid, bn_mode: str, hidden_width: int = 21, hidden_layers: int = 1) -> NetworkSpec:
    """Net evaluated at steps ``1..N-1``; BN rows are indexed ``i - 1``."""
    return NetworkSpec(input_dim=2, hidden_layers=hidden_layers, hidden_width=hidden_width,
                       bn_mode=bn_mode, n_time_steps=max(grid.n_steps - 1, 1))


def _net_inputs(case: MarketCase, grid: TimeGrid, batch: PathBatch) -> np.ndarray:
    n = grid.n_steps
    x = batch.values[:, 1:n].T
    ttm = (case.maturity - grid.times[1:n])[:, None]
    return np.stack([x, np.broadcast_to(ttm, x.shape)], axis=-1)


def roll_forward(case: MarketCase, grid: TimeGrid, batch: PathBatch, net: Network, spec: NetworkSpec,
                 training: bool = True):
    """Run the value recursion over the batch; returns ``(Y_T, cache)``."""
    n, dw = grid.n_steps, batch.increments
    growth = 1.0 + case.rate * grid.dt
    if n > 1:
        z_net, net_cache = forward_steps(net, spec, np.arange(n - 1), _net_inputs(case, grid, batch), training)
    else:
        z_net, net_cache = np.zeros((0, batch.batch_size)), None
    y = np.full(batch.batch_size, float(net.params["y0"]))
    y = growth * y + float(net.params["z0"]) * dw[:, 0]
    for i in range(1, n):
        y = growth * y + z_net[i - 1] * dw[:, i]
    return y, {"net": net_cache, "growth": growth, "z": z_net}


def loss(y_terminal, case: MarketCase, x_terminal) -> float:
    """Mean squared gap between ``Y_T`` and the bridge-weighted payoff."""
    resid = np.asarray(y_terminal) - modified_payoff(case, x_terminal)
    return float(np.mean(resid * resid))


def loss_and_grads(case: MarketCase, grid: TimeGrid, batch: PathBatch, net: Network, spec: NetworkSpec):
    """Loss and its gradient with respect to every trainable parameter."""
    y_t, cache = roll_forward(case, grid, batch, net, spec, training=True)
    resid = y_t - modified_payoff(case, batch.terminal)
    value = float(np.mean(resid * resid))
    n, dw = grid.n_steps, batch.increments
    dy = 2.0 * resid / resid.size
    # dY_T/dY_i = growth^(N - i)
    powers = cache["growth"] ** np.arange(n - 1, -1, -1, dtype=np.float64)
    grads = {}
    if cache["net"] is not None:
        dz = (powers[1:, None] * dw[:, 1:].T) * dy[None, :]
        grads, _ = backward(net, spec, cache["net"], dz)
    grads["y0"] = np.array(np.sum(dy) * cache["growth"] ** n)
    grads["z0"] = np.array(np.sum(dy * dw[:, 0]) * powers[0])
    return value, grads, cache


def _norms(params) -> str:
    return ", ".join(f"{k}={float(np.linalg.norm(v)):.3g}" for k, v in sorted(params.items()))


def train(case: MarketCase, cfg: TrainConfig, grid: TimeGrid | None = None) -> TrainResult:
    """Fit ``(theta, Y0, Z0)`` with Adam on fresh path batches each iteration.

    Every ``STOP_WINDOW`` iterations the mean ``Y0`` over the latest window is
    compared with the previous window's; training stops once the change is
    below ``cfg.stop_threshold`` and ``cfg.min_iterations`` have run.  The
    reported price is the mean ``Y0`` over the final window.
    """
    grid = build_time_grid(case) if grid is None else grid
    spec = network_spec_for(grid, cfg.bn_mode, cfg.hidden_width, cfg.hidden_layers)
    y0_high = max(case.spot - case.strike, 0.0) + 2.0
    net = init_network(spec, generator(cfg.seed, _INIT_STREAM), y0_high=y0_high)
    opt = adam_init(net.params, cfg.initial_lr)
    losses, prices, lrs = [], [], []
    converged = False
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        for it in range(cfg.max_iterations):
            opt = replace(opt, lr=cfg.lr_at(it))
            batch = simulate_paths(case, grid, cfg.batch_size, cfg.seed, stream=_TRAIN_STREAM + it)
            value, grads, cache = loss_and_grads(case, grid, batch, net, spec)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at iteration {it}; parameter norms: {_norms(net.params)}")
            losses.append(value)
            prices.append(float(net.params["y0"]))
            lrs.append(opt.lr)
            if cache["net"] is not None:
                net = update_running_stats(net, spec, cache["net"])
            new_params, opt = adam_step(opt, net.params, grads)
            net = Network(new_params, net.running)
            done = it + 1
            if cfg.stopping_enabled and done % STOP_WINDOW == 0 and done >= 2 * STOP_WINDOW:
                cur = np.mean(prices[done - STOP_WINDOW:done])
                prev = np.mean(prices[done - 2 * STOP_WINDOW:done - STOP_WINDOW])
                if abs(cur - prev) < cfg.stop_threshold and done >= cfg.min_iterations:
                    converged = done < cfg.max_iterations
                    break
    price = float(np.mean(prices[-STOP_WINDOW:]))
    return TrainResult(
        price=price,
        z0=float(net.params["z0"]),
        iterations_run=len(prices),
        loss_history=losses,
        price_history=prices,
        lr_history=lrs,
        converged=converged,
        wall_time=time.perf_counter() - start,
        network=net,
        spec=spec,
    )

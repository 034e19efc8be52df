"""Feed-forward Elu network with per-time-step batch normalization, by hand.

One network is shared by all time steps and receives ``(X, T - t)``.  When
batch normalization is on, every normalized layer owns one ``(gamma, beta)``
row per time step, so the map still depends on the step index.

Tensors carry a leading step axis: inputs are ``(S, B, D)``, one slab of
``B`` paths per evaluated step, and batch statistics are taken over ``B``
separately for each slab.  All routines are pure; training-mode forward
passes return the fresh batch statistics in the cache and
:func:`update_running_stats` folds them into the running averages.

Layout of ``Network.params`` for ``L = hidden_layers``::

    W0 .. WL, b0 .. bL      dense layers, WL maps to the scalar output
    gamma0, beta0           input normalization, shape (n_time_steps, input_dim)
    gamma1.., beta1..       hidden pre-activation normalization (every-layer only)
    y0, z0                  trainable initial value and initial control
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "BN_MODES",
    "NetworkSpec",
    "Network",
    "AdamState",
    "elu",
    "elu_grad",
    "batchnorm_forward",
    "batchnorm_backward",
    "init_network",
    "forward",
    "forward_steps",
    "backward",
    "update_running_stats",
    "adam_init",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

BN_MODES = ("none", "input-only", "every-layer")
BN_EPS = 1e-5
BN_MOMENTUM = 0.99
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 2
    hidden_layers: int = 1
    hidden_width: int = 21
    activation: str = "elu"
    bn_mode: str = "none"
    n_time_steps: int = 1

    def __post_init__(self):
        if self.activation != "elu":
            raise ValueError("only the elu activation is supported")
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}")
        if min(self.input_dim, self.hidden_layers, self.hidden_width, self.n_time_steps) < 1:
            raise ValueError("dimensions and step count must be >= 1")

    @property
    def bn_layers(self) -> list[int]:
        """Indices of normalized layers: 0 is the input, j >= 1 the j-th hidden layer."""
        if self.bn_mode == "none":
            return []
        if self.bn_mode == "input-only":
            return [0]
        return list(range(self.hidden_layers + 1))

    def bn_width(self, j: int) -> int:
        return self.input_dim if j == 0 else self.hidden_width

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [1]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class Network:
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)

    def n_trainable(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Network":
        return Network({k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.running.items()})


# -- activations and normalization -----------------------------------------


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _bn_train(x, gamma, beta):
    # x: (S, B, D); gamma, beta: (S, D)
    if x.shape[1] < 2:
        raise ValueError("batch normalization in training mode needs batch size >= 2")
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv_std
    out = xhat * gamma[:, None, :] + beta[:, None, :]
    return out, (xhat, inv_std, gamma, True, mean[:, 0, :], var[:, 0, :])


def _bn_infer(x, gamma, beta, mean, var):
    inv_std = 1.0 / np.sqrt(var + BN_EPS)[:, None, :]
    xhat = (x - mean[:, None, :]) * inv_std
    out = xhat * gamma[:, None, :] + beta[:, None, :]
    return out, (xhat, inv_std, gamma, False, None, None)


def _bn_backward(dout, cache):
    xhat, inv_std, gamma, training, _, _ = cache
    dgamma = np.sum(dout * xhat, axis=1)
    dbeta = np.sum(dout, axis=1)
    dxhat = dout * gamma[:, None, :]
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.shape[1]
    dx = (inv_std / n) * (
        n * dxhat
        - np.sum(dxhat, axis=1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None):
    """Normalize a ``(B, D)`` batch.

    ``mode`` is ``"train"`` (batch statistics) or ``"infer"`` (running
    statistics, which must then be given).  Returns ``(out, cache)``; in
    training mode ``cache`` also carries the batch mean and variance.
    """
    x = np.asarray(x, dtype=np.float64)[None]
    g, b = np.asarray(gamma, dtype=np.float64)[None], np.asarray(beta, dtype=np.float64)[None]
    if mode == "train":
        out, cache = _bn_train(x, g, b)
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise ValueError("inference mode needs running statistics")
        out, cache = _bn_infer(x, g, b, np.asarray(running_mean)[None], np.asarray(running_var)[None])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out[0], cache


def batchnorm_backward(dout, cache):
    """Gradients ``(dx, dgamma, dbeta)`` for :func:`batchnorm_forward`."""
    dx, dgamma, dbeta = _bn_backward(np.asarray(dout, dtype=np.float64)[None], cache)
    return dx[0], dgamma[0], dbeta[0]


# -- network -----------------------------------------------------------------


def init_network(spec: NetworkSpec, rng: np.random.Generator, y0_high: float = 2.0) -> Network:
    """Glorot-uniform weights, zero biases, unit BN scale.

    ``y0`` is drawn from ``U[0, y0_high]`` and ``z0`` from ``U[-0.1, 0.1]``.
    """
    params: dict[str, np.ndarray] = {}
    for ell, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{ell}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        params[f"b{ell}"] = np.zeros(fan_out)
    running = {}
    for j in spec.bn_layers:
        width = spec.bn_width(j)
        params[f"gamma{j}"] = np.ones((spec.n_time_steps, width))
        params[f"beta{j}"] = np.zeros((spec.n_time_steps, width))
        running[f"mean{j}"] = np.zeros((spec.n_time_steps, width))
        running[f"var{j}"] = np.ones((spec.n_time_steps, width))
    params["y0"] = np.array(rng.uniform(0.0, y0_high))
    params["z0"] = np.array(rng.uniform(-0.1, 0.1))
    return Network(params, running)


def _normalize(net, j, h, steps, training):
    gamma = net.params[f"gamma{j}"][steps]
    beta = net.params[f"beta{j}"][steps]
    if training:
        return _bn_train(h, gamma, beta)
    return _bn_infer(h, gamma, beta, net.running[f"mean{j}"][steps], net.running[f"var{j}"][steps])


def _use_fused(spec, fused):
    available = kernels.mlp1_forward is not None and spec.hidden_layers == 1
    if fused is None:
        return available
    if fused and not available:
        raise RuntimeError("fused kernel unavailable for this backend or architecture")
    return fused


def _bn_rows(net, spec, j, steps):
    if j not in spec.bn_layers:
        return None, None, None, None
    rm, rv = net.running.get(f"mean{j}"), net.running.get(f"var{j}")
    return (np.ascontiguousarray(net.params[f"gamma{j}"][steps]),
            np.ascontiguousarray(net.params[f"beta{j}"][steps]),
            None if rm is None else np.ascontiguousarray(rm[steps]),
            None if rv is None else np.ascontiguousarray(rv[steps]))


def forward_steps(net: Network, spec: NetworkSpec, steps, inputs, training: bool = True, fused=None):
    """Evaluate the net on ``inputs`` of shape ``(S, B, input_dim)``.

    ``steps`` holds the time index of each slab (selects BN rows).
    Returns ``(Z, cache)`` with ``Z`` of shape ``(S, B)``.  ``fused`` picks the
    compiled one-hidden-layer kernel (default: whenever it is available).
    """
    steps = np.asarray(steps, dtype=np.intp)
    h = np.asarray(inputs, dtype=np.float64)
    assert h.ndim == 3 and h.shape[2] == spec.input_dim and h.shape[0] == steps.size
    if spec.bn_layers and (steps.min() < 0 or steps.max() >= spec.n_time_steps):
        raise IndexError("time index out of range for the batch-norm parameters")
    s, b, _ = h.shape
    if spec.bn_layers and training and b < 2:
        raise ValueError("batch normalization in training mode needs batch size >= 2")
    if _use_fused(spec, fused):
        g0, be0, rm0, rv0 = _bn_rows(net, spec, 0, steps)
        g1, be1, rm1, rv1 = _bn_rows(net, spec, 1, steps)
        z, kc = kernels.mlp1_forward(
            np.ascontiguousarray(h), net.params["W0"], net.params["b0"], net.params["W1"][:, 0],
            float(net.params["b1"][0]), g0, be0, rm0, rv0, g1, be1, rm1, rv1, training, BN_EPS)
        return z, {"steps": steps, "training": training, "fused": kc, "gamma": (g0, g1)}
    bn = set(spec.bn_layers)
    cache = {"steps": steps, "training": training, "layers": []}
    if 0 in bn:
        h, c = _normalize(net, 0, h, steps, training)
        cache["bn0"] = c
    for ell in range(spec.hidden_layers + 1):
        w, bias = net.params[f"W{ell}"], net.params[f"b{ell}"]
        a = (h.reshape(s * b, -1) @ w).reshape(s, b, -1) + bias
        layer = {"input": h}
        if ell < spec.hidden_layers:
            if ell + 1 in bn:
                a, c = _normalize(net, ell + 1, a, steps, training)
                cache[f"bn{ell + 1}"] = c
            layer["pre"] = a
            h = elu(a)
        else:
            h = a
        cache["layers"].append(layer)
    return h[:, :, 0], cache


def forward(net: Network, spec: NetworkSpec, time_index: int, inputs, training: bool = True):
    """Single-step evaluation on a ``(B, input_dim)`` batch; returns ``(Z (B,), cache)``."""
    z, cache = forward_steps(net, spec, [time_index], np.asarray(inputs)[None], training)
    return z[0], cache


def backward(net: Network, spec: NetworkSpec, cache: dict, dz):
    """Reverse pass of :func:`forward_steps` (or :func:`forward`).

    ``dz`` is the loss gradient with respect to ``Z`` in the same shape as the
    forward output.  Returns ``(grads, dinputs)``; ``grads`` has an entry for
    every network parameter except ``y0`` and ``z0``.
    """
    steps = cache["steps"]
    dz = np.asarray(dz, dtype=np.float64)
    single = dz.ndim == 1
    dh = (dz[None] if single else dz)[:, :, None]
    s, b, _ = dh.shape
    grads: dict[str, np.ndarray] = {}

    def scatter(j, dgamma, dbeta):
        g = np.zeros_like(net.params[f"gamma{j}"])
        bt = np.zeros_like(net.params[f"beta{j}"])
        np.add.at(g, steps, dgamma)
        np.add.at(bt, steps, dbeta)
        grads[f"gamma{j}"], grads[f"beta{j}"] = g, bt

    if "fused" in cache:
        g0, g1 = cache["gamma"]
        dw0, db0, dw1, db1, dg0, dbe0, dg1, dbe1, dx = kernels.mlp1_backward(
            np.ascontiguousarray(dh[:, :, 0]), cache["fused"], net.params["W0"], net.params["W1"][:, 0], g0, g1)
        grads.update(W0=dw0, b0=db0, W1=dw1[:, None], b1=np.array([db1]))
        if dg0 is not None:
            scatter(0, dg0, dbe0)
        if dg1 is not None:
            scatter(1, dg1, dbe1)
        return grads, (dx[0] if single else dx)

    for ell in range(spec.hidden_layers, -1, -1):
        layer = cache["layers"][ell]
        if ell < spec.hidden_layers:
            dh = dh * elu_grad(layer["pre"])
            key = f"bn{ell + 1}"
            if key in cache:
                dh, dgamma, dbeta = _bn_backward(dh, cache[key])
                scatter(ell + 1, dgamma, dbeta)
        x = layer["input"]
        w = net.params[f"W{ell}"]
        flat = dh.reshape(s * b, -1)
        grads[f"W{ell}"] = x.reshape(s * b, -1).T @ flat
        grads[f"b{ell}"] = flat.sum(axis=0)
        dh = (flat @ w.T).reshape(s, b, -1)
    if "bn0" in cache:
        dh, dgamma, dbeta = _bn_backward(dh, cache["bn0"])
        scatter(0, dgamma, dbeta)
    return grads, (dh[0] if single else dh)


def update_running_stats(net: Network, spec: NetworkSpec, cache: dict, momentum: float = BN_MOMENTUM) -> Network:
    """New network whose running BN statistics absorb the batch statistics in ``cache``."""
    if not cache["training"] or not spec.bn_layers:
        return net
    running = {k: v.copy() for k, v in net.running.items()}
    steps = cache["steps"]
    for j in spec.bn_layers:
        if "fused" in cache:
            mean, var = cache["fused"][f"mean{j}"], cache["fused"][f"var{j}"]
        else:
            _, _, _, _, mean, var = cache[f"bn{j}"]
        rm, rv = running[f"mean{j}"], running[f"var{j}"]
        rm[steps] = momentum * rm[steps] + (1.0 - momentum) * mean
        rv[steps] = momentum * rv[steps] + (1.0 - momentum) * var
    return Network(net.params, running)


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], lr: float, **hyper) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(zeros, {k: z.copy() for k, z in zeros.items()}, 0, lr, **hyper)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_params[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t, state.lr, b1, b2, state.eps)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, net: Network, spec: NetworkSpec) -> None:
    """JSON checkpoint: spec, then ``{name: {"shape": [...], "data": [...]}}`` per array."""

    def pack(arrays):
        return {k: {"shape": list(v.shape), "data": np.ravel(v).tolist()} for k, v in sorted(arrays.items())}

    doc = {
        "format": "barrier-bsde-network",
        "version": CHECKPOINT_VERSION,
        "spec": {
            "input_dim": spec.input_dim,
            "hidden_layers": spec.hidden_layers,
            "hidden_width": spec.hidden_width,
            "activation": spec.activation,
            "bn_mode": spec.bn_mode,
            "n_time_steps": spec.n_time_steps,
        },
        "params": pack(net.params),
        "running": pack(net.running),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[Network, NetworkSpec]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "barrier-bsde-network":
        raise ValueError(f"{path}: not a network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")

    def unpack(d):
        return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}

    return Network(unpack(doc["params"]), unpack(doc["running"])), NetworkSpec(**doc["spec"])

"""Compiled kernels vs the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]

Times the Euler path simulator, the path-bridge weight kernel, the network
forward+backward pass and one full training iteration, on problem sizes
used in practice (512 or 65536 paths, 80 steps, width 21).
"""

import argparse
import math
import time

import numpy as np

from barrier_bsde import _kernels_py, kernels
from barrier_bsde.model_core import MarketCase, block_normals, build_time_grid, generator, simulate_paths
from barrier_bsde.nn import backward, forward_steps, init_network
from barrier_bsde.solver import _net_inputs, loss_and_grads, network_spec_for


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    case = MarketCase(spot=22.0, strike=23.0, barrier=40.0, maturity=0.5, volatility=0.4)
    grid = build_time_grid(case)
    rows = []

    dw = block_normals(0, 0, 65536, grid.n_steps) * math.sqrt(grid.dt)
    for name, mod in (("numpy", _kernels_py), ("compiled", kernels)):
        rows.append(("euler 65536x80", name, best_of(lambda: mod.euler_gbm(22.0, 0.0, 0.4, dw), args.repeat)))

    z = block_normals(0, 2, 65536, grid.n_steps)
    pw = (math.log(22.0), -0.08 * grid.dt, 0.4 * math.sqrt(grid.dt), math.log(40.0), 0.16 * grid.dt)
    for name, mod in (("numpy", _kernels_py), ("compiled", kernels)):
        rows.append(("path-bridge 65536x80", name, best_of(lambda: mod.bridge_path_weights(z, *pw), args.repeat)))

    batch = simulate_paths(case, grid, 512, 0, stream=16)
    x = _net_inputs(case, grid, batch)
    dz = generator(0, 9).standard_normal(x.shape[:2])
    for mode in ("none", "input-only", "every-layer"):
        spec = network_spec_for(grid, mode)
        net = init_network(spec, generator(0, 3))
        steps = np.arange(spec.n_time_steps)
        for name, fused in (("numpy", False), ("compiled", True)):
            def fb():
                _, cache = forward_steps(net, spec, steps, x, training=True, fused=fused)
                backward(net, spec, cache, dz)
            rows.append((f"net fwd+bwd {mode} 79x512", name, best_of(fb, args.repeat)))

    spec = network_spec_for(grid, "every-layer")
    net = init_network(spec, generator(0, 3))
    saved = kernels.mlp1_forward, kernels.mlp1_backward
    for name in ("numpy", "compiled"):
        if name == "numpy":
            kernels.mlp1_forward = kernels.mlp1_backward = None
        else:
            kernels.mlp1_forward, kernels.mlp1_backward = saved

        def step():
            b = simulate_paths(case, grid, 512, 0, stream=16)
            loss_and_grads(case, grid, b, net, spec)
        rows.append(("train iteration every-layer", name, best_of(step, args.repeat)))
    kernels.mlp1_forward, kernels.mlp1_backward = saved

    print(f"{'kernel':32s} {'backend':9s} {'ms':>9s} {'speedup':>8s}")
    base = {}
    for label, name, t in rows:
        if name == "numpy":
            base[label] = t
        speed = base[label] / t if name == "compiled" else 1.0
        print(f"{label:32s} {name:9s} {1e3 * t:9.2f} {speed:8.2f}x")


if __name__ == "__main__":
    main()

"""NumPy implementations of the hot loops.

Always importable; the compiled module in ``_kernels.pyx`` mirrors these
signatures and is preferred when it has been built.
"""

import numpy as np


def euler_gbm(x0, drift_dt, vol, dw):
    """Multiplicative Euler recursion over the columns of ``dw`` (paths, steps)."""
    n_paths, n_steps = dw.shape
    x = np.empty((n_paths, n_steps + 1))
    x[:, 0] = x0
    for i in range(n_steps):
        xi = x[:, i]
        x[:, i + 1] = xi + drift_dt * xi + vol * xi * dw[:, i]
    return x


def bridge_path_weights(z, log_x0, mu_dt, vol_sqrt_dt, log_barrier, var_dt):
    """Exact log-GBM paths from normals ``z`` and their bridge survival weights.

    Returns ``(x_terminal, weight)`` where ``weight`` is the product over steps
    of the per-step no-crossing probabilities, zero once any grid point
    reaches the barrier.
    """
    n_paths, n_steps = z.shape
    log_x = np.empty((n_paths, n_steps + 1))
    log_x[:, 0] = log_x0
    np.cumsum(mu_dt + vol_sqrt_dt * z, axis=1, out=log_x[:, 1:])
    log_x[:, 1:] += log_x0
    gap = log_barrier - log_x
    alive = np.all(gap > 0.0, axis=1)
    step_survival = 1.0 - np.exp(-2.0 * gap[:, :-1] * gap[:, 1:] / var_dt)
    np.clip(step_survival, 0.0, 1.0, out=step_survival)
    weight = np.where(alive, np.prod(step_survival, axis=1), 0.0)
    return np.exp(log_x[:, -1]), weight

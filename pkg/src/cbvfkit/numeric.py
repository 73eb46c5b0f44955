"""Small numerical helpers: finite differences and RK4 stepping."""

from __future__ import annotations

from typing import Callable

import numpy as np


def central_diff_jacobian(fn: Callable[[np.ndarray], np.ndarray],
                          x: np.ndarray,
                          step: float | np.ndarray = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``.

    ``fn`` maps an (n,) vector to a scalar or an array; the result has the
    output shape with an extra trailing axis of length n.
    """
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    cols = []
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = steps[i]
        cols.append((np.asarray(fn(x + dx)) - np.asarray(fn(x - dx))) / (2.0 * steps[i]))
    return np.stack(cols, axis=-1)


def central_diff_gradient(fn: Callable[[np.ndarray], float],
                          x: np.ndarray,
                          step: float | np.ndarray = 1e-6) -> np.ndarray:
    return central_diff_jacobian(lambda y: np.asarray(fn(y), dtype=float), x, step)


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    """One fixed-step RK4 update of ``dx/dt = rhs(x)`` (autonomous)."""
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

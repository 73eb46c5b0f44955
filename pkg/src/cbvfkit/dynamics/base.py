"""Control-affine system description shared by every solver in the package.

All callables are vectorized: they accept a single state of shape (n,) or a
batch of shape (B, n) and return outputs with matching leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import ConfigError

Array = np.ndarray


@dataclass(frozen=True)
class ControlSet:
    """Compact convex admissible input set: an axis-aligned box or a ball.

    ``bounds`` holds per-axis half-widths for a box, or a single radius for
    a ball. ``center`` defaults to the origin.
    """

    kind: str                      # "box" | "ball"
    bounds: Array                  # (m,) half-widths, or (1,) radius
    center: Array                  # (m,)

    def __post_init__(self):
        if self.kind not in ("box", "ball"):
            raise ConfigError(f"unknown control set kind {self.kind!r}")
        if np.any(np.asarray(self.bounds) <= 0.0):
            raise ConfigError("control set half-widths/radius must be positive")

    @staticmethod
    def box(half_widths, center=None) -> "ControlSet":
        hw = np.atleast_1d(np.asarray(half_widths, dtype=float))
        c = np.zeros_like(hw) if center is None else np.asarray(center, dtype=float)
        return ControlSet("box", hw, c)

    @staticmethod
    def ball(radius: float, dim: int, center=None) -> "ControlSet":
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        return ControlSet("ball", np.asarray([float(radius)]), c)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def radius(self) -> float:
        if self.kind != "ball":
            raise ConfigError("radius only defined for ball sets")
        return float(self.bounds[0])

    def contains(self, u: Array, tol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        d = u - self.center
        if self.kind == "box":
            return np.all(np.abs(d) <= self.bounds + tol, axis=-1)
        return np.linalg.norm(d, axis=-1) <= self.radius + tol


@dataclass(frozen=True)
class SamplingRegion:
    """Axis-aligned box of states used for sampling and domain guards."""

    lo: Array
    hi: Array
    periodic: tuple[bool, ...] = ()

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("sampling region needs lo < hi per axis")
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * lo.size)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def widths(self) -> Array:
        return self.hi - self.lo

    def contains(self, x: Array, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        return self.lo + rng.random((n, self.dim)) * self.widths


@dataclass
class SystemModel:
    """Control-affine dynamics ``xdot = f(x) + g(x) u`` with a safety margin h.

    ``jac_f(x)`` is (n, n); ``jac_g(x)`` is the (n, m, n) tensor of dg/dx with
    jac_g[i, j, k] = d g[i, j] / d x[k]. ``h`` is the signed safety margin
    defining S = {x : h(x) >= 0} and ``grad_h`` its gradient.
    """

    name: str
    state_dim: int
    control_dim: int
    f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    jac_f: Callable[[Array], Array]
    jac_g: Callable[[Array], Array]
    control_set: ControlSet
    h: Callable[[Array], Array]
    grad_h: Callable[[Array], Array]
    state_names: tuple[str, ...] = ()
    # Index of the state coordinate directly constrained by h (lateral error
    # for the track systems); used by the boundary samplers.
    constraint_index: Optional[int] = None
    # Index of the virtual class-K state, when the system carries one.
    gamma_state_index: Optional[int] = None
    default_region: Optional[SamplingRegion] = None
    extras: dict = field(default_factory=dict)

    def xdot(self, x: Array, u: Array) -> Array:
        """Evaluate f(x) + g(x) u; broadcasts over leading batch axes."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        gu = np.einsum("...nm,...m->...n", self.g(x), u)
        return self.f(x) + gu

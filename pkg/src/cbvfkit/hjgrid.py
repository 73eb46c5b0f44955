"""Exact grid solver for the discounted safety value function.

Marches the obstacle-constrained update

    V^{k+1} = min( l,  V^k + dtau * (H(x, DV^k) + gamma V^k) ),   V^0 = l

in time-to-go with a Lax-Friedrichs numerical Hamiltonian (central
differences plus per-axis dissipation), where H maximizes over the control
set in closed form. Intended as ground truth for low-dimensional systems;
construction is guarded to state_dim <= 3.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics.base import SystemModel
from .errors import ConfigError, ExtrapolationError, NumericalBlowup, VersionError
from .pmp import support_value

Array = np.ndarray

GRID_MAGIC = b"CBVF"
GRID_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Per-axis uniform grids. Periodic axes exclude the right endpoint so
    wraparound neighbors are one spacing apart."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * len(self.counts))
        if not (len(self.lo) == len(self.hi) == len(self.counts) == len(self.periodic)):
            raise ConfigError("grid spec fields must have matching lengths")
        if any(c < 4 for c in self.counts):
            raise ConfigError("need at least 4 nodes per axis")

    @property
    def ndim(self) -> int:
        return len(self.counts)

    def axis(self, i: int) -> Array:
        if self.periodic[i]:
            step = (self.hi[i] - self.lo[i]) / self.counts[i]
            return self.lo[i] + step * np.arange(self.counts[i])
        return np.linspace(self.lo[i], self.hi[i], self.counts[i])

    @property
    def spacings(self) -> Array:
        return np.array([self.axis(i)[1] - self.axis(i)[0] for i in range(self.ndim)])

    def mesh(self) -> Array:
        axes = [self.axis(i) for i in range(self.ndim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class GridValueFunction:
    """Time-stamped value slices on a uniform grid; immutable once built."""

    spec: GridSpec
    taus: Array                # (K,) ascending, taus[0] == 0
    values: Array              # (K, *counts)
    gamma: float
    dt: float                  # spacing between stored slices
    system_id: str

    @property
    def horizon(self) -> float:
        return float(self.taus[-1])

    def _locate(self, x: Array):
        """Cell indices + fractions for multilinear interpolation of (B, n)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.empty(x.shape, dtype=int)
        frac = np.empty(x.shape)
        for i in range(self.spec.ndim):
            ax = self.spec.axis(i)
            dx = ax[1] - ax[0]
            if self.spec.periodic[i]:
                period = self.spec.hi[i] - self.spec.lo[i]
                t = np.mod(x[:, i] - ax[0], period) / dx
                idx[:, i] = np.floor(t).astype(int) % len(ax)
                frac[:, i] = t - np.floor(t)
            else:
                if np.any(x[:, i] < ax[0] - 1e-12) or np.any(x[:, i] > ax[-1] + 1e-12):
                    raise ExtrapolationError(
                        f"coordinate {i} outside grid [{ax[0]}, {ax[-1]}]")
                t = np.clip((x[:, i] - ax[0]) / dx, 0.0, len(ax) - 1 - 1e-12)
                idx[:, i] = np.floor(t).astype(int)
                frac[:, i] = t - idx[:, i]
        return idx, frac

    def _interp_slice(self, slice_values: Array, x: Array,
                      slice_index: Array | None = None) -> Array:
        """Multilinear interpolation on one slice, or per-sample slices when
        ``slice_index`` is given (slice_values is then the full (K, ...) stack)."""
        idx, frac = self._locate(x)
        n = self.spec.ndim
        out = np.zeros(idx.shape[0])
        for corner in range(2 ** n):
            bits = [(corner >> i) & 1 for i in range(n)]
            weight = np.ones(idx.shape[0])
            pos = []
            for i, b in enumerate(bits):
                weight = weight * (frac[:, i] if b else (1.0 - frac[:, i]))
                count = self.spec.counts[i]
                p = idx[:, i] + b
                pos.append(p % count if self.spec.periodic[i] else np.minimum(p, count - 1))
            if slice_index is None:
                out += weight * slice_values[tuple(pos)]
            else:
                out += weight * slice_values[(slice_index,) + tuple(pos)]
        return out

    def _tau_bracket(self, tau):
        """Bracketing slice indices and weights; tau may be scalar or array."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < -1e-12) or np.any(tau > self.horizon + 1e-9):
            raise ExtrapolationError(f"tau outside [0, {self.horizon}]")
        tau = np.clip(tau, 0.0, self.horizon)
        k = np.searchsorted(self.taus, tau, side="right")
        k = np.clip(k, 1, len(self.taus) - 1)
        t0, t1 = self.taus[k - 1], self.taus[k]
        w = (tau - t0) / (t1 - t0)
        return k - 1, k, w

    def values_at(self, tau: float) -> Array:
        """Full grid slice linearly interpolated in tau."""
        k0, k1, w = self._tau_bracket(float(tau))
        return (1.0 - w) * self.values[k0] + w * self.values[k1]

    def value(self, x: Array, tau) -> Array:
        """V at a batch of states; tau may be shared or per-sample."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k0, k1, w = self._tau_bracket(tau)
        if np.ndim(k0) == 0:
            v0 = self._interp_slice(self.values[k0], x)
            v1 = self._interp_slice(self.values[k1], x)
        else:
            v0 = self._interp_slice(self.values, x, slice_index=k0)
            v1 = self._interp_slice(self.values, x, slice_index=k1)
        return (1.0 - w) * v0 + w * v1

    def value_and_gradients(self, x: Array, tau):
        """(V, dV/dx, dV/dtau) at a point or batch.

        Spatial gradients are central differences of the interpolated value
        with a half-spacing probe (one-sided at non-periodic edges); the
        temporal slope comes from the bracketing slices.
        """
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = self.value(x, tau)
        grad = np.empty_like(x)
        for i in range(self.spec.ndim):
            ax = self.spec.axis(i)
            hstep = 0.5 * (ax[1] - ax[0])
            xp, xm = x.copy(), x.copy()
            if self.spec.periodic[i]:
                xp[:, i] += hstep
                xm[:, i] -= hstep
                grad[:, i] = (self.value(xp, tau) - self.value(xm, tau)) / (2 * hstep)
            else:
                xp[:, i] = np.minimum(x[:, i] + hstep, ax[-1])
                xm[:, i] = np.maximum(x[:, i] - hstep, ax[0])
                denom = xp[:, i] - xm[:, i]
                grad[:, i] = (self.value(xp, tau) - self.value(xm, tau)) / denom

        k0, k1, _ = self._tau_bracket(tau)
        if np.ndim(k0) == 0:
            dv0 = self._interp_slice(self.values[k0], x)
            dv1 = self._interp_slice(self.values[k1], x)
        else:
            dv0 = self._interp_slice(self.values, x, slice_index=k0)
            dv1 = self._interp_slice(self.values, x, slice_index=k1)
        dvdtau = (dv1 - dv0) / (self.taus[k1] - self.taus[k0])
        if single:
            return float(v[0]), grad[0], float(dvdtau[0])
        return v, grad, dvdtau

    def local_lipschitz(self, x: Array, tau: float) -> Array:
        _, grad, _ = self.value_and_gradients(x, tau)
        return np.linalg.norm(np.atleast_2d(grad), axis=-1)


def _shift(V: Array, axis: int, offset: int, periodic: bool) -> Array:
    """Neighbor values with linear extrapolation past non-periodic edges."""
    if periodic:
        return np.roll(V, -offset, axis=axis)
    out = np.roll(V, -offset, axis=axis)
    # overwrite the wrapped band with extrapolated ghosts
    idx = [slice(None)] * V.ndim
    if offset > 0:
        idx[axis] = slice(-1, None)
        edge = [slice(None)] * V.ndim
        edge[axis] = slice(-1, None)
        prev = [slice(None)] * V.ndim
        prev[axis] = slice(-2, -1)
        out[tuple(idx)] = 2 * V[tuple(edge)] - V[tuple(prev)]
    else:
        idx[axis] = slice(0, 1)
        edge = [slice(None)] * V.ndim
        edge[axis] = slice(0, 1)
        nxt = [slice(None)] * V.ndim
        nxt[axis] = slice(1, 2)
        out[tuple(idx)] = 2 * V[tuple(edge)] - V[tuple(nxt)]
    return out


def solve_cbvf(system: SystemModel, spec: GridSpec, gamma: float, horizon: float,
               cfl: float = 0.5, record_every: int = 1,
               progress: bool = False) -> GridValueFunction:
    """Time-march the variational-inequality update on the grid.

    dtau is set from the CFL condition dtau <= cfl / sum_i(alpha_i / dx_i),
    which also satisfies the per-axis bound cfl * min_i(dx_i / alpha_i) and
    keeps the update monotone for cfl <= 1.
    """
    if system.state_dim > 3:
        raise ConfigError("grid solver limited to state_dim <= 3")
    if spec.ndim != system.state_dim:
        raise ConfigError("grid dimension must match the system")
    if not (0.0 < cfl <= 1.0):
        raise ConfigError("cfl must be in (0, 1]")
    if gamma < 0.0:
        raise ConfigError("gamma must be >= 0")

    X = spec.mesh()
    l_grid = np.asarray(system.h(X), dtype=float)
    if np.min(l_grid) >= 0.0:
        raise ConfigError("grid never sees the safe-set boundary; enlarge it")

    f_grid = system.f(X)
    g_grid = system.g(X)
    cset = system.control_set
    f_eff = f_grid + np.einsum("...nm,m->...n", g_grid, cset.center)
    if cset.kind == "box":
        reach = np.einsum("...nm,m->...n", np.abs(g_grid), cset.bounds)
    else:
        reach = cset.radius * np.linalg.norm(g_grid, axis=-1)
    alphas = np.array([np.max(np.abs(f_eff[..., i]) + reach[..., i])
                       for i in range(spec.ndim)])
    dx = spec.spacings
    denom = float(np.sum(alphas / dx))
    if denom <= 0.0:
        raise ConfigError("degenerate dynamics: zero propagation speed")
    dtau = cfl / denom
    n_steps = max(1, int(np.ceil(horizon / dtau)))
    dtau = horizon / n_steps

    def hamiltonian(P):
        w = np.einsum("...nm,...n->...m", g_grid, P)
        return np.einsum("...n,...n->...", P, f_grid) + support_value(cset, w)

    # Pin non-periodic domain edges at V = l. The grid is required to extend
    # past the safe set in the constrained directions, where the exact value
    # saturates at l; this keeps the edge stencil monotone (extrapolation
    # ghosts have zero dissipation there and are anti-stable for inflow).
    edge = np.zeros(spec.counts, dtype=bool)
    for i in range(spec.ndim):
        if not spec.periodic[i]:
            sl = [slice(None)] * spec.ndim
            sl[i] = [0, spec.counts[i] - 1]
            edge[tuple(sl)] = True

    V = l_grid.copy()
    slices = [V.copy()]
    taus = [0.0]
    for k in range(1, n_steps + 1):
        d_plus = np.empty_like(X)
        d_minus = np.empty_like(X)
        for i in range(spec.ndim):
            d_plus[..., i] = (_shift(V, i, +1, spec.periodic[i]) - V) / dx[i]
            d_minus[..., i] = (V - _shift(V, i, -1, spec.periodic[i])) / dx[i]
        # marching dV/dtau = H + gamma V: dissipation enters with + sign so
        # it acts as diffusion in this time direction
        ham = hamiltonian(0.5 * (d_plus + d_minus))
        diss = 0.5 * np.einsum("i,...i->...", alphas, d_plus - d_minus)
        V = np.minimum(l_grid, V + dtau * (ham + diss + gamma * V))
        V[edge] = l_grid[edge]
        if not np.all(np.isfinite(V)):
            raise NumericalBlowup(k)
        if k % record_every == 0 or k == n_steps:
            slices.append(V.copy())
            taus.append(k * dtau)
        if progress and (k % max(1, n_steps // 10) == 0):
            print(f"  march {k}/{n_steps}")
    return GridValueFunction(spec=spec, taus=np.asarray(taus),
                             values=np.stack(slices), gamma=float(gamma),
                             dt=float(dtau * record_every), system_id=system.name)


def zero_level_set(vf: GridValueFunction, tau: float) -> list[Array]:
    """Zero contour of V(., tau): marching squares in 2D, marching cubes in
    3D. Returns one (P_i, ndim) array of physical coordinates per connected
    component (2D); a single vertex array in 3D. Empty list when the value
    has no sign change."""
    from skimage import measure

    slice_v = vf.values_at(tau)
    if np.all(slice_v > 0.0) or np.all(slice_v < 0.0):
        return []
    lo = np.array([vf.spec.axis(i)[0] for i in range(vf.spec.ndim)])
    dx = vf.spec.spacings
    if vf.spec.ndim == 2:
        contours = measure.find_contours(slice_v, 0.0)
        return [lo + c * dx for c in contours]
    if vf.spec.ndim == 3:
        verts, _, _, _ = measure.marching_cubes(slice_v, 0.0, spacing=tuple(dx))
        return [verts + lo]
    raise ConfigError("level-set extraction supports 2D and 3D grids only")


def export_level_set_csv(vf: GridValueFunction, tau: float, path) -> None:
    header = ["component", "point"] + [f"x{i}" for i in range(vf.spec.ndim)]
    lines = [",".join(header)]
    for ci, comp in enumerate(zero_level_set(vf, tau)):
        for pi, pt in enumerate(np.atleast_2d(comp)):
            lines.append(",".join([str(ci), str(pi)] + [f"{v:.9g}" for v in pt]))
    Path(path).write_text("\n".join(lines) + "\n")


def save_grid(vf: GridValueFunction, path) -> None:
    """Binary container: magic, version, JSON header, little-endian float64
    taus then slice-major values."""
    header = {
        "schema_version": GRID_SCHEMA_VERSION,
        "dims": list(vf.spec.counts),
        "axes": [{"lo": vf.spec.lo[i], "hi": vf.spec.hi[i],
                  "count": vf.spec.counts[i], "periodic": vf.spec.periodic[i]}
                 for i in range(vf.spec.ndim)],
        "gamma": vf.gamma,
        "dt": vf.dt,
        "n_slices": int(vf.taus.size),
        "system_id": vf.system_id,
        "system_hash": hashlib.sha256(vf.system_id.encode()).hexdigest()[:16],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<IQ", GRID_SCHEMA_VERSION, len(blob)))
        fh.write(blob)
        fh.write(vf.taus.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(vf.values).astype("<f8").tobytes())


def load_grid(path) -> GridValueFunction:
    with open(path, "rb") as fh:
        if fh.read(4) != GRID_MAGIC:
            raise VersionError("not a grid container file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != GRID_SCHEMA_VERSION:
            raise VersionError(f"grid schema {version} != {GRID_SCHEMA_VERSION}")
        header = json.loads(fh.read(hlen).decode())
        spec = GridSpec(
            lo=tuple(a["lo"] for a in header["axes"]),
            hi=tuple(a["hi"] for a in header["axes"]),
            counts=tuple(a["count"] for a in header["axes"]),
            periodic=tuple(bool(a["periodic"]) for a in header["axes"]),
        )
        k = header["n_slices"]
        taus = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        payload = np.frombuffer(fh.read(), dtype="<f8").copy()
    values = payload.reshape((k,) + spec.counts)
    return GridValueFunction(spec=spec, taus=taus, values=values,
                             gamma=float(header["gamma"]), dt=float(header["dt"]),
                             system_id=header["system_id"])

"""Self-supervised value-function learner with analytic input gradients.

The learned value has the hard-constrained form

    V(x, tau) = l(x) + tau * Pi(z(x, tau)),

where Pi is a small fully connected network over box-normalized inputs, so
V(x, 0) = l(x) holds exactly by construction. Training minimizes the mean
absolute residual of the variational inequality

    | min( l(x) - V,  -dV/dtau + H(x, dV/dx) + gamma V ) |

which requires derivatives of the loss with respect to parameters *through*
the input gradients of the network; the reverse pass for that
(forward-tangent plus backprop through both chains) is written out by hand
and checked against finite differences in the test suite.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dynamics.base import SamplingRegion, SystemModel
from .errors import ConfigError, ExtrapolationError, TrainingDiverged, VersionError
from . import pmp

Array = np.ndarray

MODEL_SCHEMA_VERSION = 1


def _constraint_fns(meta: dict) -> tuple[Callable, Callable]:
    if meta.get("kind") != "lateral_margin":
        raise ConfigError(f"unknown constraint kind {meta.get('kind')!r}")
    idx = int(meta["index"])
    hw = float(meta["half_width"])

    def l_fn(x):
        x = np.asarray(x, dtype=float)
        return hw - np.abs(x[..., idx])

    def grad_l_fn(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., idx] = -np.sign(x[..., idx])
        return out

    return l_fn, grad_l_fn


def constraint_meta_from_system(system: SystemModel) -> dict:
    if system.constraint_index is None or "half_width" not in system.extras:
        raise ConfigError("system lacks a lateral-margin constraint description")
    return {"kind": "lateral_margin", "index": system.constraint_index,
            "half_width": system.extras["half_width"]}


class ValueNet:
    """MLP value source with the exact-at-tau-0 ansatz.

    Weights live in ``Ws``/``bs`` (W shaped (fan_out, fan_in)); hidden layers
    apply sin(omega0 * h) (or tanh), the output layer is linear.
    """

    def __init__(self, state_lo, state_hi, horizon: float, constraint: dict,
                 hidden=(64, 64), activation: str = "sine", omega0: float = 30.0,
                 seed: int = 0, provenance: Optional[dict] = None):
        if activation not in ("sine", "tanh"):
            raise ConfigError(f"unsupported activation {activation!r}")
        self.state_lo = np.asarray(state_lo, dtype=float)
        self.state_hi = np.asarray(state_hi, dtype=float)
        if self.state_lo.shape != self.state_hi.shape:
            raise ConfigError("normalization bounds must match")
        self.horizon = float(horizon)
        self.constraint = dict(constraint)
        self.l_fn, self.grad_l_fn = _constraint_fns(self.constraint)
        self.hidden = tuple(int(w) for w in hidden)
        self.activation = activation
        self.omega0 = float(omega0)
        self.seed = int(seed)
        self.provenance = provenance or {}
        self.state_dim = self.state_lo.size
        self.in_dim = self.state_dim + 1
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        dims = [self.in_dim, *self.hidden, 1]
        self.Ws, self.bs = [], []
        for k in range(len(dims) - 1):
            fan_in, fan_out = dims[k], dims[k + 1]
            if self.activation == "sine":
                if k == 0:
                    bound = 1.0 / fan_in
                else:
                    bound = np.sqrt(6.0 / fan_in) / self.omega0
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.Ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.bs.append(rng.uniform(-1.0, 1.0, size=fan_out) / np.sqrt(fan_in))

    def pack(self) -> Array:
        parts = []
        for W, b in zip(self.Ws, self.bs):
            parts.append(W.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def unpack(self, theta: Array) -> None:
        pos = 0
        for k, (W, b) in enumerate(zip(self.Ws, self.bs)):
            self.Ws[k] = theta[pos:pos + W.size].reshape(W.shape).copy()
            pos += W.size
            self.bs[k] = theta[pos:pos + b.size].copy()
            pos += b.size
        if pos != theta.size:
            raise ConfigError("parameter vector size mismatch")

    def checksum(self) -> str:
        return hashlib.sha256(self.pack().tobytes()).hexdigest()[:16]

    # -- forward / gradients ----------------------------------------------

    def _normalize(self, x: Array, tau: Array):
        zx = 2.0 * (x - self.state_lo) / (self.state_hi - self.state_lo) - 1.0
        zt = np.asarray(tau, dtype=float) / self.horizon
        return np.concatenate([zx, zt[..., None]], axis=-1)

    @property
    def _input_scales(self) -> Array:
        sx = 2.0 / (self.state_hi - self.state_lo)
        return np.concatenate([sx, [1.0 / self.horizon]])

    def _act(self, h):
        if self.activation == "sine":
            return np.sin(self.omega0 * h)
        return np.tanh(h)

    def _act_prime(self, h):
        if self.activation == "sine":
            return self.omega0 * np.cos(self.omega0 * h)
        return 1.0 / np.cosh(h) ** 2

    def _act_second(self, h):
        if self.activation == "sine":
            return -self.omega0 ** 2 * np.sin(self.omega0 * h)
        t = np.tanh(h)
        return -2.0 * t * (1.0 - t * t)

    def _forward_raw(self, z: Array):
        """Caches for the double-backward pass: activations and pre-activations."""
        a = [z]
        hs = []
        cur = z
        for W, b in zip(self.Ws[:-1], self.bs[:-1]):
            h = cur @ W.T + b
            hs.append(h)
            cur = self._act(h)
            a.append(cur)
        pi = (cur @ self.Ws[-1].T + self.bs[-1])[:, 0]
        return pi, a, hs

    def _input_grad_raw(self, a, hs):
        """d pi / d z from cached forward state; (B, in_dim)."""
        r = np.broadcast_to(self.Ws[-1], (a[0].shape[0], self.Ws[-1].shape[1])).copy()
        for k in range(len(hs) - 1, -1, -1):
            r = (r * self._act_prime(hs[k])) @ self.Ws[k]
        return r

    def _param_grads(self, a, hs, alpha: Array, v: Array) -> Array:
        """Gradient w.r.t. parameters of sum_b [alpha_b pi_b + v_b . dpi/dz_b].

        The second term is handled by propagating the tangent t0 = v forward
        (a directional derivative of pi) and backpropagating through both the
        primal and tangent chains, which needs the activation's second
        derivative.
        """
        B = a[0].shape[0]
        ts = [v]
        us = []
        for k, h in enumerate(hs):
            u = ts[-1] @ self.Ws[k].T
            us.append(u)
            ts.append(self._act_prime(h) * u)

        gWs = [np.zeros_like(W) for W in self.Ws]
        gbs = [np.zeros_like(b) for b in self.bs]
        gWs[-1] = (np.einsum("b,bd->d", alpha, a[-1])
                   + ts[-1].sum(axis=0))[None, :]
        gbs[-1] = np.array([alpha.sum()])
        bar_a = alpha[:, None] * self.Ws[-1]
        bar_t = np.broadcast_to(self.Ws[-1], (B, self.Ws[-1].shape[1]))
        for k in range(len(hs) - 1, -1, -1):
            sp = self._act_prime(hs[k])
            spp = self._act_second(hs[k])
            bar_u = bar_t * sp
            bar_h = bar_t * spp * us[k] + bar_a * sp
            gWs[k] = np.einsum("bo,bi->oi", bar_u, ts[k]) + np.einsum("bo,bi->oi", bar_h, a[k])
            gbs[k] = bar_h.sum(axis=0)
            bar_t = bar_u @ self.Ws[k]
            bar_a = bar_h @ self.Ws[k]
        parts = []
        for gW, gb in zip(gWs, gbs):
            parts.append(gW.ravel())
            parts.append(gb.ravel())
        return np.concatenate(parts)

    # -- public evaluation ---------------------------------------------------

    def value(self, x: Array, tau) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tau_arr = np.broadcast_to(np.asarray(tau, dtype=float), x.shape[:-1])
        pi, _, _ = self._forward_raw(self._normalize(x, tau_arr))
        return self.l_fn(x) + tau_arr * pi

    def value_and_gradients(self, x: Array, tau):
        """(V, dV/dx, dV/dtau) with the ansatz chain folded in; accepts a
        single state or a batch."""
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tau_arr = np.broadcast_to(np.asarray(tau, dtype=float), x.shape[:-1])
        pi, a, hs = self._forward_raw(self._normalize(x, tau_arr))
        q = self._input_grad_raw(a, hs) * self._input_scales
        V = self.l_fn(x) + tau_arr * pi
        gx = self.grad_l_fn(x) + tau_arr[:, None] * q[:, :-1]
        gtau = pi + tau_arr * q[:, -1]
        if single:
            return float(V[0]), gx[0], float(gtau[0])
        return V, gx, gtau


def forward_with_gradients(net: ValueNet, x: Array, tau: float):
    """Value and analytic input derivatives at a single (x, tau)."""
    return net.value_and_gradients(np.asarray(x, dtype=float), float(tau))


def vi_residual(source, system: SystemModel, x: Array, tau, gamma) -> Array:
    """|min(l - V, -dV/dtau + H + gamma V)| for any value source exposing
    ``value_and_gradients``. ``gamma`` may be a scalar or "state" to read the
    system's virtual class-K coordinate."""
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    tau_arr = np.broadcast_to(np.asarray(tau, dtype=float), x2.shape[:-1])
    V, gx, gtau = source.value_and_gradients(x2, tau_arr)
    gam = x2[:, system.gamma_state_index] if isinstance(gamma, str) else float(gamma)
    f = system.f(x2)
    g = system.g(x2)
    w = np.einsum("bnm,bn->bm", g, gx)
    H = np.einsum("bn,bn->b", gx, f) + pmp.support_value(system.control_set, w)
    A = np.asarray(system.h(x2)) - V
    Bb = -gtau + H + gam * V
    out = np.abs(np.minimum(A, Bb))
    return float(out[0]) if np.ndim(x) == 1 else out


def _residual_and_cotangents(net: ValueNet, system: SystemModel, x: Array,
                             tau: Array, gamma):
    """Batch residual plus d resid / d pi and d resid / d (dpi/dz).

    Uses the maximizer fixed at its optimum (Danskin) for the derivative of
    the Hamiltonian term.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tau = np.asarray(tau, dtype=float)
    pi, a, hs = net._forward_raw(net._normalize(x, tau))
    scales = net._input_scales
    q = net._input_grad_raw(a, hs)
    lval = net.l_fn(x)
    V = lval + tau * pi
    gx = net.grad_l_fn(x) + tau[:, None] * q[:, :-1] * scales[:-1]
    gtau = pi + tau * q[:, -1] * scales[-1]

    gam = x[:, system.gamma_state_index] if isinstance(gamma, str) else float(gamma)
    f = system.f(x)
    g = system.g(x)
    w = np.einsum("bnm,bn->bm", g, gx)
    cset = system.control_set
    if cset.kind == "box":
        ustar = cset.center + cset.bounds * np.sign(w)
    else:
        nrm = np.linalg.norm(w, axis=-1, keepdims=True)
        ustar = cset.center + np.where(nrm > 0, cset.radius * w / np.maximum(nrm, 1e-300), 0.0)
    H = np.einsum("bn,bn->b", gx, f) + np.einsum("bm,bm->b", w, ustar)
    A = -tau * pi                      # l - V under the ansatz
    Bb = -gtau + H + gam * V
    m = np.minimum(A, Bb)
    resid = np.abs(m)
    sgn = np.sign(m)
    branch_a = A <= Bb

    dH_dgx = f + np.einsum("bnm,bm->bn", g, ustar)
    alpha = np.where(branch_a, -tau * sgn, sgn * (-1.0 + gam * tau))
    v = np.zeros_like(q)
    not_a = ~branch_a
    v[:, :-1] = np.where(not_a[:, None],
                         sgn[:, None] * tau[:, None] * scales[None, :-1] * dH_dgx,
                         0.0)
    v[:, -1] = np.where(not_a, -sgn * tau * scales[-1], 0.0)
    # caches for the parameter-gradient pass
    return resid, alpha, v, a, hs


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 200
    epochs_curriculum: int = 1800
    epochs_finetune: int = 300
    batch_size: int = 256
    lr: float = 2e-4
    lr_min: float = 1e-6
    lr_schedule: str = "cosine"        # "cosine" | "constant"
    seed: int = 0
    strategy: str = "pmp"              # "pmp" | "uniform"
    gamma: float = 0.0
    use_state_gamma: bool = False
    horizon: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "sine"
    omega0: float = 30.0
    interior_fraction: float = 0.4
    noise_half_width: float = 0.10
    pool_size: int = 4000              # boundary-node pool for the pmp strategy
    dataset_size: Optional[int] = 3000  # None: fresh states every batch
    dataset_dt: float = 1e-3
    n_extremals: int = 32
    window_policy: str = "reject"      # trajectory stamps vs curriculum window
    divergence_factor: float = 1e3

    @property
    def total_epochs(self) -> int:
        return self.epochs_pretrain + self.epochs_curriculum + self.epochs_finetune


@dataclass
class TrainReport:
    residuals: Array            # per-epoch mean |VI residual|
    checksum: str
    wall_time: float
    seed: int
    diverged: bool = False
    meta: dict = field(default_factory=dict)


class BoundarySampler:
    """Draws training batches: interior states plus boundary-focused states.

    ``pmp_pool`` holds (states, times) nodes from integrated boundary
    trajectories; when absent, boundary rows are drawn uniformly on the
    analytic boundary manifold instead. Boundary lateral positions get
    +-noise perturbations, producing both safe and unsafe states.

    With ``dataset_size`` set, the state sets are pregenerated once and
    batches resample them with replacement (the fixed-dataset regime used
    for sample-efficiency comparisons); time-to-go stamps are still drawn
    per batch so the curriculum window applies, except for boundary nodes
    from trajectories, which keep their integration stamp (clamped).
    """

    def __init__(self, system: SystemModel, region: SamplingRegion,
                 interior_fraction: float, noise_half_width: float,
                 pmp_pool: Optional[tuple[Array, Array]] = None,
                 dataset_size: Optional[int] = None,
                 seed: int = 0, window_policy: str = "reject"):
        self.system = system
        self.region = region
        self.interior_fraction = float(interior_fraction)
        self.noise = float(noise_half_width)
        self.pmp_pool = pmp_pool
        self.hw = system.extras.get("half_width")
        self.cidx = system.constraint_index
        if window_policy not in ("clamp", "reject", "tube"):
            raise ConfigError(f"unknown window_policy {window_policy!r}")
        self.window_policy = window_policy
        self.fixed = None
        if dataset_size is not None:
            rng = np.random.default_rng(seed + 13579)
            n_b = int(np.floor((1.0 - self.interior_fraction) * dataset_size))
            n_i = dataset_size - n_b
            Xi = pmp._sample_interior(system, region, n_i, rng)
            Xb, Tb = self._fresh_boundary(rng, n_b)
            self.fixed = {"interior": Xi, "boundary": Xb, "sigma": Tb}

    def _fresh_boundary(self, rng, n):
        """Boundary states with integration stamps (pmp pool) or None."""
        if self.pmp_pool is not None:
            Xp, Tp = self.pmp_pool
            pick = rng.integers(0, Xp.shape[0], size=n)
            Xb, Tb = Xp[pick].copy(), Tp[pick].copy()
        else:
            Xb = self.region.sample(n, rng)
            Xb[:, self.cidx] = self.hw * np.where(rng.random(n) < 0.5, -1.0, 1.0)
            Tb = None
        if self.noise > 0:
            Xb[:, self.cidx] += rng.uniform(-self.noise, self.noise, size=n)
        return Xb, Tb

    def _boundary_pool(self):
        """(states, stamps, noise_pending) for the active boundary source."""
        if self.fixed is not None:
            return self.fixed["boundary"], self.fixed["sigma"], False
        if self.pmp_pool is not None:
            return self.pmp_pool[0], self.pmp_pool[1], True
        return None, None, True

    def draw(self, rng: np.random.Generator, n: int, window: tuple[float, float]):
        n_boundary = int(np.floor((1.0 - self.interior_fraction) * n))
        n_interior = n - n_boundary
        if self.fixed is None:
            Xi = pmp._sample_interior(self.system, self.region, n_interior, rng)
        else:
            Xi = self.fixed["interior"][
                rng.integers(0, self.fixed["interior"].shape[0], size=n_interior)]
        Ti = rng.uniform(window[0], window[1], size=n_interior)
        if n_boundary == 0:
            return Xi, Ti

        pool_X, pool_T, noise_pending = self._boundary_pool()
        if pool_X is None:
            # analytic boundary manifold, fresh each batch
            Xb = self.region.sample(n_boundary, rng)
            Xb[:, self.cidx] = self.hw * np.where(rng.random(n_boundary) < 0.5,
                                                  -1.0, 1.0)
            Tb = rng.uniform(window[0], window[1], size=n_boundary)
        elif pool_T is None:
            # fixed dataset of manifold states: times drawn per batch
            pick = rng.integers(0, pool_X.shape[0], size=n_boundary)
            Xb = pool_X[pick].copy()
            Tb = rng.uniform(window[0], window[1], size=n_boundary)
        else:
            if self.window_policy in ("reject", "tube"):
                # keep the boundary share on the reachable-tube surface: only
                # nodes whose integration stamp fits the curriculum window
                eligible = np.where(pool_T <= window[1])[0]
                if eligible.size == 0:
                    eligible = np.arange(pool_T.size)
                pick = eligible[rng.integers(0, eligible.size, size=n_boundary)]
            else:
                pick = rng.integers(0, pool_X.shape[0], size=n_boundary)
            Xb = pool_X[pick].copy()
            Tb = np.clip(pool_T[pick], window[0], window[1])
            if self.window_policy == "tube":
                # a node that touches tangentially at time-to-go sigma stays
                # on the zero level for every later time-to-go (the touch can
                # be followed by a strictly safe continuation), so the stamp
                # may be drawn anywhere in [sigma, window end]
                hi = max(window[1], 1e-12)
                Tb = Tb + (hi - Tb) * rng.random(n_boundary)
        if noise_pending and self.noise > 0:
            Xb[:, self.cidx] += rng.uniform(-self.noise, self.noise,
                                            size=n_boundary)
        return np.concatenate([Xi, Xb]), np.concatenate([Ti, Tb])


def make_sampler(system: SystemModel, config: TrainConfig,
                 region: SamplingRegion | None = None) -> BoundarySampler:
    """Build the configured sampler; the pmp strategy pregenerates its
    boundary-node pool once (deterministic in config.seed)."""
    region = region or system.default_region
    pool = None
    if config.strategy == "pmp":
        ds = pmp.DatasetConfig(horizon=config.horizon, dt=config.dataset_dt,
                               seed=config.seed, n_extremals=config.n_extremals,
                               max_rounds=8)
        rng = np.random.default_rng(config.seed + 777)
        pool = pmp.collect_boundary_nodes(system, ds, region, rng, config.pool_size)
    elif config.strategy != "uniform":
        raise ConfigError(f"unknown sampling strategy {config.strategy!r}")
    return BoundarySampler(system, region, config.interior_fraction,
                           config.noise_half_width, pool,
                           dataset_size=config.dataset_size, seed=config.seed,
                           window_policy=config.window_policy)


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    t = epoch / max(config.total_epochs - 1, 1)
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + np.cos(np.pi * t))


def _window_at(config: TrainConfig, epoch: int) -> tuple[float, float]:
    if epoch < config.epochs_pretrain:
        return (0.0, 0.0)
    k = epoch - config.epochs_pretrain
    if k < config.epochs_curriculum:
        frac = (k + 1) / config.epochs_curriculum
        return (0.0, config.horizon * frac)
    return (0.0, config.horizon)


def train(system: SystemModel, config: TrainConfig,
          sampler: BoundarySampler | None = None,
          region: SamplingRegion | None = None) -> tuple[ValueNet, TrainReport]:
    """Stochastic training of the VI residual with the phase schedule:
    residual at tau=0 only, then a linearly expanding time window, then the
    full window. Deterministic given the config seed."""
    region = region or system.default_region
    sampler = sampler or make_sampler(system, config, region)
    rng = np.random.default_rng(config.seed)
    net = ValueNet(state_lo=region.lo, state_hi=region.hi, horizon=config.horizon,
                   constraint=constraint_meta_from_system(system),
                   hidden=config.hidden, activation=config.activation,
                   omega0=config.omega0, seed=config.seed,
                   provenance={"strategy": config.strategy, "gamma": config.gamma,
                               "epochs": config.total_epochs})
    theta = net.pack()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    gamma = "state" if config.use_state_gamma else config.gamma

    t0 = time.perf_counter()
    residuals = np.empty(config.total_epochs)
    initial = None
    diverged = False
    for epoch in range(config.total_epochs):
        X, T = sampler.draw(rng, config.batch_size, _window_at(config, epoch))
        resid, alpha, v, a, hs = _residual_and_cotangents(net, system, X, T, gamma)
        loss = float(resid.mean())
        residuals[epoch] = loss
        if initial is None:
            initial = max(loss, 1e-12)
        if loss > config.divergence_factor * initial:
            diverged = True
            residuals = residuals[:epoch + 1]
            break
        grad = net._param_grads(a, hs, alpha / resid.size, v / resid.size)
        m1 = beta1 * m1 + (1 - beta1) * grad
        m2 = beta2 * m2 + (1 - beta2) * grad * grad
        k = epoch + 1
        mhat = m1 / (1 - beta1 ** k)
        vhat = m2 / (1 - beta2 ** k)
        theta = theta - _lr_at(config, epoch) * mhat / (np.sqrt(vhat) + eps)
        net.unpack(theta)
    wall = time.perf_counter() - t0
    report = TrainReport(residuals=residuals, checksum=net.checksum(),
                         wall_time=wall, seed=config.seed, diverged=diverged,
                         meta={"strategy": config.strategy,
                               "epochs": config.total_epochs,
                               "batch_size": config.batch_size})
    if diverged:
        raise TrainingDiverged(
            f"residual {residuals[-1]:.3e} exceeded {config.divergence_factor} x initial")
    return net, report


def distill_from_grid(vf, hidden=(64, 64), epochs: int = 3000, batch_size: int = 512,
                      lr: float = 3e-4, seed: int = 0, activation: str = "sine",
                      omega0: float = 30.0, constraint: dict | None = None,
                      region: SamplingRegion | None = None) -> ValueNet:
    """Supervised L2 fit of a net to a grid value function (test utility and
    a quick way to get a well-formed net-backed filter)."""
    if constraint is None:
        raise ConfigError("distill_from_grid needs the constraint metadata")
    lo = np.array([vf.spec.lo[i] for i in range(vf.spec.ndim)])
    hi = np.array([vf.spec.hi[i] for i in range(vf.spec.ndim)])
    region = region or SamplingRegion(lo=lo, hi=hi, periodic=vf.spec.periodic)
    net = ValueNet(state_lo=region.lo, state_hi=region.hi, horizon=vf.horizon,
                   constraint=constraint, hidden=hidden, activation=activation,
                   omega0=omega0, seed=seed,
                   provenance={"strategy": "distilled", "source": vf.system_id})
    rng = np.random.default_rng(seed)
    theta = net.pack()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for epoch in range(epochs):
        X = region.sample(batch_size, rng)
        T = rng.uniform(0.0, vf.horizon, size=batch_size)
        target = _grid_values(vf, X, T)
        pi, a, hs = net._forward_raw(net._normalize(X, T))
        V = net.l_fn(X) + T * pi
        err = V - target
        alpha = 2.0 * err * T / batch_size
        v = np.zeros((batch_size, net.in_dim))
        grad = net._param_grads(a, hs, alpha, v)
        m1 = beta1 * m1 + (1 - beta1) * grad
        m2 = beta2 * m2 + (1 - beta2) * grad * grad
        k = epoch + 1
        theta = theta - lr * (m1 / (1 - beta1 ** k)) / (np.sqrt(m2 / (1 - beta2 ** k)) + eps)
        net.unpack(theta)
    return net


def _grid_values(vf, X: Array, T: Array) -> Array:
    out = np.empty(T.size)
    order = np.argsort(T)
    for i in order:
        out[i] = vf.value(X[i:i + 1], float(T[i]))[0]
    return out


def save_model(net: ValueNet, path) -> None:
    payload = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "arch": {"hidden": list(net.hidden), "activation": net.activation,
                 "omega0": net.omega0},
        "normalization": {"lo": net.state_lo.tolist(), "hi": net.state_hi.tolist(),
                          "horizon": net.horizon},
        "constraint": net.constraint,
        "seed": net.seed,
        "provenance": net.provenance,
        "weights_b64": base64.b64encode(net.pack().astype("<f8").tobytes()).decode(),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_model(path) -> ValueNet:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise VersionError(f"model schema {payload.get('schema_version')} "
                           f"!= {MODEL_SCHEMA_VERSION}")
    net = ValueNet(state_lo=payload["normalization"]["lo"],
                   state_hi=payload["normalization"]["hi"],
                   horizon=payload["normalization"]["horizon"],
                   constraint=payload["constraint"],
                   hidden=payload["arch"]["hidden"],
                   activation=payload["arch"]["activation"],
                   omega0=payload["arch"]["omega0"],
                   seed=payload["seed"],
                   provenance=payload.get("provenance", {}))
    raw = base64.b64decode(payload["weights_b64"])
    net.unpack(np.frombuffer(raw, dtype="<f8").astype(float))
    return net

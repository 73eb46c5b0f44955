"""Two-state lateral corridor model used for exact verification.

State x = (e, dphi): lateral error and course error relative to a track
segment of constant reference curvature. The single input is the commanded
path curvature, so at fixed speed V:

    de/dt    = V sin(dphi)
    ddphi/dt = V u - kappa_ref V cos(dphi) / (1 - kappa_ref e)

with |u| <= curvature_bound and safety margin h(x) = half_width - |e|.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DomainError
from .base import ControlSet, SamplingRegion, SystemModel
from .track import TrackGeometry


def kinematic_corridor_model(speed: float,
                             curvature_bound: float,
                             track: TrackGeometry | None = None,
                             kappa_ref: float = 0.0) -> SystemModel:
    """Build the corridor system at fixed ``speed`` on a constant-curvature segment.

    ``kappa_ref`` defaults to 0 (straight segment); pass 1/turn_radius to
    model a turn. Raises DomainError from f/g when 1 - kappa_ref*e <= 0.
    """
    if speed <= 0.0:
        raise ConfigError("speed must be positive")
    if curvature_bound <= 0.0:
        raise ConfigError("curvature_bound must be positive")
    track = track or TrackGeometry()
    V = float(speed)
    kap = float(kappa_ref)
    hw = track.half_width

    def _check(x):
        if kap != 0.0 and np.any(1.0 - kap * x[..., 0] <= 0.0):
            raise DomainError("lateral error reaches the turn-center singularity")

    def f(x):
        x = np.asarray(x, dtype=float)
        _check(x)
        e, dphi = x[..., 0], x[..., 1]
        out = np.empty_like(x)
        out[..., 0] = V * np.sin(dphi)
        out[..., 1] = -kap * V * np.cos(dphi) / (1.0 - kap * e) if kap != 0.0 else 0.0
        return out

    def g(x):
        x = np.asarray(x, dtype=float)
        _check(x)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = V
        return out

    def jac_f(x):
        x = np.asarray(x, dtype=float)
        _check(x)
        e, dphi = x[..., 0], x[..., 1]
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = V * np.cos(dphi)
        if kap != 0.0:
            den = 1.0 - kap * e
            J[..., 1, 0] = -(kap ** 2) * V * np.cos(dphi) / den ** 2
            J[..., 1, 1] = kap * V * np.sin(dphi) / den
        return J

    def jac_g(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 1, 2))

    def h(x):
        x = np.asarray(x, dtype=float)
        return hw - np.abs(x[..., 0])

    def grad_h(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = -np.sign(x[..., 0])
        return out

    region = SamplingRegion(
        lo=np.array([-hw - 1.0, -np.pi]),
        hi=np.array([hw + 1.0, np.pi]),
        periodic=(False, True),
    )
    return SystemModel(
        name=f"corridor(V={V:g},ubar={curvature_bound:g},kappa={kap:g})",
        state_dim=2,
        control_dim=1,
        f=f,
        g=g,
        jac_f=jac_f,
        jac_g=jac_g,
        control_set=ControlSet.box([curvature_bound]),
        h=h,
        grad_h=grad_h,
        state_names=("e", "dphi"),
        constraint_index=0,
        default_region=region,
        extras={"speed": V, "half_width": hw, "kappa_ref": kap},
    )

"""Oval track geometry: curvature profile and frenet/global conversions.

The centerline is a stadium: two straights of length L joined by two
half-circle turns of radius R, traversed counterclockwise starting at the
origin heading +X. Positive lateral offset e points left of the direction
of travel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, VersionError

TRACK_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrackGeometry:
    straight_length: float = 20.0
    turn_radius: float = 12.0
    half_width: float = 3.0

    def __post_init__(self):
        if min(self.straight_length, self.turn_radius, self.half_width) <= 0:
            raise ConfigError("track dimensions must be positive")

    @property
    def total_length(self) -> float:
        return 2.0 * self.straight_length + 2.0 * np.pi * self.turn_radius

    def _segments(self):
        L, R = self.straight_length, self.turn_radius
        arc = np.pi * R
        return [0.0, L, L + arc, 2 * L + arc, 2 * L + 2 * arc]

    def kappa_ref(self, s):
        """Piecewise-constant reference curvature: 0 on straights, 1/R on turns."""
        s = np.mod(np.asarray(s, dtype=float), self.total_length)
        b = self._segments()
        on_turn = ((s >= b[1]) & (s < b[2])) | (s >= b[3])
        return np.where(on_turn, 1.0 / self.turn_radius, 0.0)

    def kappa_smooth(self, s, blend: float = 2.0):
        """C1 curvature with cosine ramps of length ``blend`` at segment joins.

        The raw profile is discontinuous, which breaks the smoothness the
        PMP and residual machinery assume; this variant is used wherever the
        dynamics must be differentiable in s.
        """
        s = np.mod(np.asarray(s, dtype=float), self.total_length)
        k = 1.0 / self.turn_radius
        val = np.zeros_like(s)
        for start, end in self._turn_intervals():
            val = val + k * self._ramp(s, start, end, blend)
        return val

    def dkappa_smooth_ds(self, s, blend: float = 2.0):
        s = np.mod(np.asarray(s, dtype=float), self.total_length)
        k = 1.0 / self.turn_radius
        val = np.zeros_like(s)
        for start, end in self._turn_intervals():
            val = val + k * self._ramp_deriv(s, start, end, blend)
        return val

    def _turn_intervals(self):
        b = self._segments()
        return [(b[1], b[2]), (b[3], b[4])]

    @staticmethod
    def _ramp(s, start, end, w):
        # 0 before start-w/2, cosine rise to 1 across [start-w/2, start+w/2],
        # then cosine fall around `end`.
        up = np.clip((s - (start - 0.5 * w)) / w, 0.0, 1.0)
        down = np.clip((s - (end - 0.5 * w)) / w, 0.0, 1.0)
        rise = 0.5 * (1.0 - np.cos(np.pi * up))
        fall = 0.5 * (1.0 - np.cos(np.pi * down))
        return rise - fall

    @staticmethod
    def _ramp_deriv(s, start, end, w):
        up = (s - (start - 0.5 * w)) / w
        down = (s - (end - 0.5 * w)) / w
        d = np.zeros_like(s)
        m_up = (up > 0.0) & (up < 1.0)
        m_dn = (down > 0.0) & (down < 1.0)
        d = np.where(m_up, 0.5 * np.pi / w * np.sin(np.pi * np.clip(up, 0, 1)), d)
        d = d - np.where(m_dn, 0.5 * np.pi / w * np.sin(np.pi * np.clip(down, 0, 1)), 0.0)
        return d

    def centerline(self, s):
        """Centerline pose (X, Y, psi) at path progress s."""
        scalar = np.ndim(s) == 0
        s = np.atleast_1d(np.mod(np.asarray(s, dtype=float), self.total_length))
        L, R = self.straight_length, self.turn_radius
        b = self._segments()
        X = np.empty_like(s)
        Y = np.empty_like(s)
        psi = np.empty_like(s)

        m = s < b[1]                       # first straight, heading +X
        X[m], Y[m], psi[m] = s[m], 0.0, 0.0

        m = (s >= b[1]) & (s < b[2])       # first turn around (L, R)
        phi = (s[m] - b[1]) / R
        X[m] = L + R * np.sin(phi)
        Y[m] = R * (1.0 - np.cos(phi))
        psi[m] = phi

        m = (s >= b[2]) & (s < b[3])       # back straight, heading -X
        d = s[m] - b[2]
        X[m], Y[m], psi[m] = L - d, 2.0 * R, np.pi

        m = s >= b[3]                      # second turn around (0, R)
        phi = (s[m] - b[3]) / R
        X[m] = -R * np.sin(phi)
        Y[m] = R * (1.0 + np.cos(phi))
        psi[m] = np.pi + phi
        if scalar:
            return X[0], Y[0], psi[0]
        return X, Y, psi


def frenet_to_global(track: TrackGeometry, s, e, heading_err):
    """Map frenet coordinates (s, e, heading error) to a global pose."""
    s = np.asarray(s, dtype=float)
    e = np.asarray(e, dtype=float)
    heading_err = np.asarray(heading_err, dtype=float)
    cx, cy, psi_c = track.centerline(s)
    X = cx - e * np.sin(psi_c)
    Y = cy + e * np.cos(psi_c)
    return X, Y, psi_c + heading_err


def global_to_frenet(track: TrackGeometry, X, Y, psi):
    """Invert :func:`frenet_to_global` (exact per segment, nearest match).

    Each candidate segment yields an (s, e) pair; the one with the smallest
    |e| wins. Undefined at the turn centers where the arc projection is
    singular.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    psi = np.asarray(psi, dtype=float)
    L, R = track.straight_length, track.turn_radius
    b = track._segments()
    cand_s, cand_e = [], []

    # straight 1: y around 0, x in [0, L]
    cand_s.append(np.clip(X, 0.0, L))
    cand_e.append(np.where((X >= 0.0) & (X <= L), Y, np.inf))
    # straight 2: y around 2R, x in [0, L], direction -X
    cand_s.append(b[2] + np.clip(L - X, 0.0, L))
    cand_e.append(np.where((X >= 0.0) & (X <= L), -(Y - 2.0 * R), np.inf))
    # turn 1 around (L, R): phi in [0, pi]
    dx, dy = X - L, Y - R
    phi = np.arctan2(dx, -dy)              # phi=0 at (L,0), pi at (L,2R)
    rad = np.hypot(dx, dy)
    ok = (phi >= 0.0) & (phi <= np.pi) & (rad > 1e-12)
    cand_s.append(b[1] + np.clip(phi, 0.0, np.pi) * R)
    cand_e.append(np.where(ok & (dx >= 0.0), R - rad, np.inf))
    # turn 2 around (0, R): phi in [0, pi], entered at (0, 2R)
    dx, dy = X - 0.0, Y - R
    phi = np.arctan2(-dx, dy)
    rad = np.hypot(dx, dy)
    ok = (phi >= 0.0) & (phi <= np.pi) & (rad > 1e-12)
    cand_s.append(b[3] + np.clip(phi, 0.0, np.pi) * R)
    cand_e.append(np.where(ok & (dx <= 0.0), R - rad, np.inf))

    S = np.stack(cand_s, axis=0)
    E = np.stack(cand_e, axis=0)
    pick = np.argmin(np.abs(E), axis=0)
    s = np.take_along_axis(S, pick[None, ...], axis=0)[0]
    e = np.take_along_axis(E, pick[None, ...], axis=0)[0]
    _, _, psi_c = track.centerline(s)
    dpsi = np.mod(psi - psi_c + np.pi, 2.0 * np.pi) - np.pi
    return s, e, dpsi


def save_track(track: TrackGeometry, path) -> None:
    payload = {
        "schema_version": TRACK_SCHEMA_VERSION,
        "straight_length": track.straight_length,
        "turn_radius": track.turn_radius,
        "half_width": track.half_width,
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_track(path) -> TrackGeometry:
    payload = json.loads(Path(path).read_text())
    version = payload.get("schema_version")
    if version != TRACK_SCHEMA_VERSION:
        raise VersionError(f"track schema {version} != {TRACK_SCHEMA_VERSION}")
    return TrackGeometry(
        straight_length=float(payload["straight_length"]),
        turn_radius=float(payload["turn_radius"]),
        half_width=float(payload["half_width"]),
    )

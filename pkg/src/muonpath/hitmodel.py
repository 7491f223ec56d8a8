"""Chamber-local measurement model shared by simulation and reconstruction.

Inside a chamber the trajectory is expanded to second order around its
crossing of the chamber mid-plane, using the local field for the
curvature.  Drift distances, wire coordinates and trigger-strip crossings
are computed from that arc, so truth digitisation and fit predictions are
the same function of the mid-plane state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from muonpath import _kernels
from muonpath.bfield import field_kernel


@dataclass(frozen=True)
class LocalArc:
    """p(s) = p0 + t s + k s^2 / 2 in chamber coordinates (u, v, w)."""

    p0: np.ndarray
    t: np.ndarray
    k: np.ndarray
    b_mag: float

    def point(self, s):
        s = np.asarray(s, dtype=float)[..., None]
        return self.p0 + self.t * s + 0.5 * self.k * s * s

    def tangent(self, s):
        s = np.asarray(s, dtype=float)[..., None]
        return self.t + self.k * s

    def s_at_u(self, u):
        """Arc length where the local u coordinate equals ``u``."""
        u = np.asarray(u, dtype=float)
        s = (u - self.p0[0]) / self.t[0]
        for _ in range(3):
            f = self.p0[0] + self.t[0] * s + 0.5 * self.k[0] * s * s - u
            s = s - f / (self.t[0] + self.k[0] * s)
        return s

    def dca(self, u_wire, w_wire):
        """Closest approach to wires parallel to v at (u_wire, w_wire).

        Returns (distance, signed distance, arc length, v along the wire).
        Sign is positive when the wire lies to the left of the track in the
        (u, w) plane.
        """
        u_wire = np.ascontiguousarray(u_wire, dtype=float)
        w_wire = np.ascontiguousarray(w_wire, dtype=float)
        return _kernels.arc_dca(self.p0, self.t, self.k, u_wire, w_wire)


def local_arc(chamber, p5, field, u_offset: float = 0.0) -> LocalArc:
    """Arc from station-plane parameters ``(v, w, phi, theta, qop)``."""
    v, w, phi, theta, qop = (float(x) for x in p5)
    centre, rot = chamber.frame(aligned=True)
    x = centre + u_offset * rot[:, 0] + v * rot[:, 1] + w * rot[:, 2]
    st = math.sin(theta)
    tx, ty, tz = math.cos(phi) * st, math.sin(phi) * st, math.cos(theta)
    kind, params, grid = field_kernel(field)
    b, _ = _kernels.field_eval(kind, params, grid, float(x[0]), float(x[1]), float(x[2]))
    c = _kernels.C_LIGHT * qop
    curv = np.array([c * (ty * b[2] - tz * b[1]), c * (tz * b[0] - tx * b[2]),
                     c * (tx * b[1] - ty * b[0])])
    return LocalArc(np.array([u_offset, v, w]), rot.T @ np.array([tx, ty, tz]), rot.T @ curv,
                    math.sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]))


def strip_crossing(arc: LocalArc, u_plane: float) -> tuple[float, float]:
    """(v, w) where the arc meets the plane u = u_plane."""
    s = arc.s_at_u(u_plane)
    p = arc.point(s)
    return float(p[1]), float(p[2])


def line_residuals(w0: float, alpha: float, u, w, signed_r):
    """Signed wire-to-line distance minus signed drift radius."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    d = (w - w0) * ca - u * sa
    return d - signed_r


def fit_line(u, w, signed_r, w0: float, alpha: float, n_iter: int = 30):
    """Gauss-Newton straight-line fit to signed drift circles.

    Minimises sum((signed distance of wire from line - signed radius)^2);
    the line passes through (0, w0) with direction (cos a, sin a).
    Returns (w0, alpha, sum of squared residuals, 2x2 normal matrix).
    """
    w0, alpha, chi, a11, a12, a22 = _kernels.fit_line(
        np.ascontiguousarray(u, dtype=float), np.ascontiguousarray(w, dtype=float),
        np.ascontiguousarray(signed_r, dtype=float), float(w0), float(alpha), n_iter)
    return w0, alpha, chi, np.array([[a11, a12], [a12, a22]])

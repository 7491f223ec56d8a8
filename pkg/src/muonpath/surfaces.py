"""Reference surfaces, track parameters and local <-> global conversions.

Local parameters are ``(loc1, loc2, phi, theta, qop)``:

* cylinder (spectrometer / calorimeter entrance, material slabs):
  ``loc1 = R * phi_position``, ``loc2 = z``;
* station plane (chamber mid-plane): ``loc1 = v``, ``loc2 = w`` in the
  aligned chamber frame;
* perigee (beam line): ``loc1 = d0`` (signed transverse impact parameter,
  position ``(-d0 sin phi0, d0 cos phi0, z0)``), ``loc2 = z0``.

``phi`` and ``theta`` are the global azimuth and polar angle of the momentum,
``qop`` is charge over momentum in 1/GeV.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from muonpath import _kernels

QOP_MAX = 0.5  # p >= 2 GeV


class SurfaceKind(enum.Enum):
    SPECTROMETER_ENTRANCE = "SpectrometerEntrance"
    CALORIMETER_ENTRANCE = "CalorimeterEntrance"
    PERIGEE = "Perigee"
    STATION_PLANE = "StationPlane"
    CYLINDER = "Cylinder"


_CYLINDRICAL = (SurfaceKind.SPECTROMETER_ENTRANCE, SurfaceKind.CALORIMETER_ENTRANCE,
                SurfaceKind.CYLINDER)


@dataclass(frozen=True, eq=False)
class Surface:
    kind: SurfaceKind
    radius: float = 0.0
    chamber_id: int = -1
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def cylinder(cls, radius: float, kind: SurfaceKind = SurfaceKind.CYLINDER) -> "Surface":
        return cls(kind, radius=float(radius))

    @classmethod
    def perigee(cls) -> "Surface":
        return cls(SurfaceKind.PERIGEE)

    @classmethod
    def spectrometer_entrance(cls, geom) -> "Surface":
        return cls(SurfaceKind.SPECTROMETER_ENTRANCE, radius=geom.spectrometer_entrance)

    @classmethod
    def calorimeter_entrance(cls, geom) -> "Surface":
        return cls(SurfaceKind.CALORIMETER_ENTRANCE, radius=geom.calorimeter_entrance)

    @classmethod
    def station_plane(cls, chamber, u_offset: float = 0.0) -> "Surface":
        centre, rot = chamber.frame(aligned=True)
        return cls(SurfaceKind.STATION_PLANE, chamber_id=chamber.id,
                   center=centre + u_offset * rot[:, 0], rotation=rot,
                   radius=float(np.linalg.norm(centre[:2])))

    @classmethod
    def plane(cls, center, rotation) -> "Surface":
        center = np.asarray(center, dtype=float)
        return cls(SurfaceKind.STATION_PLANE, center=center,
                   rotation=np.asarray(rotation, dtype=float),
                   radius=float(np.linalg.norm(center[:2])))

    @property
    def label(self) -> str:
        if self.kind is SurfaceKind.STATION_PLANE:
            return f"StationPlane({self.chamber_id})"
        return self.kind.value

    @property
    def is_cylinder(self) -> bool:
        return self.kind in _CYLINDRICAL

    def event(self):
        if self.is_cylinder:
            return _kernels.EV_CYLINDER, np.array([self.radius])
        if self.kind is SurfaceKind.PERIGEE:
            return _kernels.EV_PERIGEE, np.zeros(1)
        return _kernels.EV_PLANE, np.concatenate([self.center, self.rotation[:, 0]])

    def constraint(self, g) -> float:
        ekind, eparams = self.event()
        return float(_kernels.event_value(ekind, eparams, np.asarray(g, dtype=float)))

    def constraint_grad(self, g) -> np.ndarray:
        out = np.zeros(7)
        if self.is_cylinder:
            rho = math.hypot(g[0], g[1])
            out[0], out[1] = g[0] / rho, g[1] / rho
        elif self.kind is SurfaceKind.PERIGEE:
            out[0], out[1], out[3], out[4] = g[3], g[4], g[0], g[1]
        else:
            out[:3] = self.rotation[:, 0]
        return out

    def to_global(self, p):
        """Local 5-vector -> (global 7-vector, d global / d local as 7x5)."""
        l1, l2, phi, theta, qop = (float(v) for v in p)
        sp, cp, st, ct = math.sin(phi), math.cos(phi), math.sin(theta), math.cos(theta)
        g = np.empty(7)
        J = np.zeros((7, 5))
        if self.is_cylinder:
            R = self.radius
            a = l1 / R
            g[0], g[1], g[2] = R * math.cos(a), R * math.sin(a), l2
            J[0, 0], J[1, 0], J[2, 1] = -math.sin(a), math.cos(a), 1.0
        elif self.kind is SurfaceKind.PERIGEE:
            g[0], g[1], g[2] = -l1 * sp, l1 * cp, l2
            J[0, 0], J[1, 0], J[2, 1] = -sp, cp, 1.0
            J[0, 2], J[1, 2] = -l1 * cp, -l1 * sp
        else:
            v, w = self.rotation[:, 1], self.rotation[:, 2]
            g[:3] = self.center + l1 * v + l2 * w
            J[:3, 0], J[:3, 1] = v, w
        g[3], g[4], g[5], g[6] = cp * st, sp * st, ct, qop
        J[3, 2], J[4, 2] = -sp * st, cp * st
        J[3, 3], J[4, 3], J[5, 3] = cp * ct, sp * ct, -st
        J[6, 4] = 1.0
        return g, J

    def to_local(self, g):
        """Global 7-vector -> (local 5-vector, d local / d global as 5x7)."""
        x, y, z, tx, ty, tz, qop = (float(v) for v in g)
        rt2 = tx * tx + ty * ty
        rt = math.sqrt(rt2)
        t2 = rt2 + tz * tz
        phi = math.atan2(ty, tx)
        theta = math.atan2(rt, tz)
        J = np.zeros((5, 7))
        dphi = np.array([-ty / rt2, tx / rt2, 0.0])
        J[2, 3:6] = dphi
        J[3, 3:6] = (tx * tz / (rt * t2), ty * tz / (rt * t2), -rt / t2)
        J[4, 6] = 1.0
        if self.is_cylinder:
            R = self.radius
            rho2 = x * x + y * y
            l1, l2 = R * math.atan2(y, x), z
            J[0, 0], J[0, 1], J[1, 2] = -R * y / rho2, R * x / rho2, 1.0
        elif self.kind is SurfaceKind.PERIGEE:
            sp, cp = math.sin(phi), math.cos(phi)
            l1, l2 = -x * sp + y * cp, z
            J[0, 0], J[0, 1], J[1, 2] = -sp, cp, 1.0
            J[0, 3:6] = (-x * cp - y * sp) * dphi
        else:
            d = np.array([x, y, z]) - self.center
            l1, l2 = float(d @ self.rotation[:, 1]), float(d @ self.rotation[:, 2])
            J[0, :3], J[1, :3] = self.rotation[:, 1], self.rotation[:, 2]
        return np.array([l1, l2, phi, theta, qop]), J


@dataclass(frozen=True, eq=False)
class TrackParameters:
    surface: Surface
    loc1: float
    loc2: float
    phi: float
    theta: float
    qop: float

    def __post_init__(self):
        if not 0.0 < self.theta < math.pi:
            raise ValueError(f"theta {self.theta} outside (0, pi)")
        if self.qop == 0.0 or abs(self.qop) > QOP_MAX + 1e-12:
            raise ValueError(f"qop {self.qop} outside 0 < |qop| <= {QOP_MAX}")

    @classmethod
    def from_vector(cls, surface: Surface, v) -> "TrackParameters":
        return cls(surface, *(float(x) for x in v))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.loc1, self.loc2, self.phi, self.theta, self.qop])

    @property
    def d0(self) -> float:
        return self.loc1 if self.surface.kind is SurfaceKind.PERIGEE else 0.0

    @property
    def z0(self) -> float:
        return self.loc2

    @property
    def charge(self) -> int:
        return 1 if self.qop > 0 else -1

    @property
    def momentum(self) -> float:
        return 1.0 / abs(self.qop)

    @property
    def pt(self) -> float:
        return math.sin(self.theta) / abs(self.qop)

    def global_state(self) -> np.ndarray:
        return self.surface.to_global(self.vector)[0]

    def position(self) -> np.ndarray:
        return self.global_state()[:3]


def check_covariance(cov, what: str = "covariance") -> np.ndarray:
    """Validate symmetry and positive semi-definiteness; returns the array."""
    cov = np.asarray(cov, dtype=float)
    scale = max(float(np.max(np.abs(cov))), 1e-300)
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise ValueError(f"{what}: not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eig.min() < -1e-10 * max(np.trace(cov), 1e-300):
        raise ValueError(f"{what}: not positive semi-definite")
    return cov


def symmetrize(m) -> np.ndarray:
    return 0.5 * (m + m.T)

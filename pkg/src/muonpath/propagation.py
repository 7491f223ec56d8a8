"""Surface-to-surface track propagation with transport Jacobians and material.

Material is treated as thin barrel slabs: on crossing one, the mean energy
loss shifts qop and, for covariance transport, multiple scattering and
straggling noise are added in the slab's local frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from muonpath import _kernels
from muonpath.bfield import field_kernel
from muonpath.surfaces import Surface, SurfaceKind, TrackParameters, symmetrize

MUON_MASS = 0.1056583755  # GeV
MAX_PATH = 60.0
DEFAULT_TOL = 1e-7
P_FLOOR = 2.0


class PropagationError(RuntimeError):
    """Target not reached; carries the last valid state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass
class MaterialCrossing:
    slab: object
    path_X0: float
    momentum_in: float
    momentum_out: float


@dataclass
class PropagationResult:
    params: TrackParameters
    cov: np.ndarray | None
    jacobian: np.ndarray
    path_length: float
    crossings: list = field(default_factory=list)


def highland(p: float, x_over_X0: float, mass: float = MUON_MASS) -> float:
    """Plane-projected multiple-scattering width (rad)."""
    if x_over_X0 <= 0:
        return 0.0
    beta = p / math.hypot(p, mass)
    return 0.0136 / (beta * p) * math.sqrt(x_over_X0) * (1.0 + 0.038 * math.log(x_over_X0))


def slab_path_X0(slab, g) -> float:
    """Radiation lengths traversed by a straight crossing of a barrel slab."""
    rho = math.hypot(g[0], g[1])
    t = np.asarray(g[3:6])
    cos_inc = abs((g[0] * t[0] + g[1] * t[1]) / rho) / float(np.linalg.norm(t))
    return slab.thickness_X0 / max(cos_inc, 1e-3)


def end_derivative(g, field) -> np.ndarray:
    kind, params, grid = field_kernel(field)
    b, _ = _kernels.field_eval(kind, params, grid, float(g[0]), float(g[1]), float(g[2]))
    t = np.asarray(g[3:6])
    out = np.zeros(7)
    out[:3] = t
    out[3:6] = _kernels.C_LIGHT * g[6] * np.cross(t, b)
    return out


def choose_direction(g, target: Surface, field) -> int:
    f0 = target.constraint(g)
    slope = float(target.constraint_grad(g) @ end_derivative(g, field))
    if target.kind is SurfaceKind.PERIGEE:
        return -1 if f0 > 0 else 1
    return 1 if f0 * slope < 0 else -1


def transport_global(g0, target: Surface, field, direction: int | None = None,
                     with_jac: bool = True, tol: float = DEFAULT_TOL, max_path: float = MAX_PATH):
    """Global state to a surface.  Returns (g, A, path) with A already
    projected onto the surface (variations of the crossing point included)."""
    g0 = np.asarray(g0, dtype=float)
    if direction is None:
        direction = choose_direction(g0, target, field)
    kind, params, grid = field_kernel(field)
    ekind, eparams = target.event()
    g, A, s, status = _kernels.transport(g0, float(direction), ekind, eparams, kind, params, grid,
                                         tol, max_path, with_jac)
    if status != _kernels.STATUS_OK:
        raise PropagationError(f"target {target.label} not reached (status {status})", g)
    if with_jac:
        dgds = end_derivative(g, field)
        grad = target.constraint_grad(g)
        denom = float(grad @ dgds)
        if abs(denom) < 1e-14:
            raise PropagationError(f"track tangent to {target.label}", g)
        A = (np.eye(7) - np.outer(dgds, grad) / denom) @ A
    return g, A, s


def transport_local(start: Surface, p, target: Surface, field, direction: int | None = None,
                    with_jac: bool = True, tol: float = DEFAULT_TOL):
    """Local parameters on ``start`` -> (local on ``target``, 5x5 Jacobian, path)."""
    g0, jl2g = start.to_global(p)
    g, A, s = transport_global(g0, target, field, direction, with_jac, tol)
    p1, jg2l = target.to_local(g)
    J = jg2l @ A @ jl2g if with_jac else None
    return p1, J, s


def energy_step(qop: float, slab, along_momentum: bool, eloss_override=None):
    """Mean energy-loss map at a slab.

    Traversing along the momentum the muon loses ``a + b * p_in``; against it
    (backtracking) the incoming momentum is restored exactly.  Returns
    (new qop, d new_qop / d qop, p_in, p_out, mean dE).
    """
    a, b = (slab.eloss_a, slab.eloss_b) if eloss_override is None else eloss_override
    q = 1.0 if qop > 0 else -1.0
    p = 1.0 / abs(qop)
    if along_momentum:
        p_in = p
        p_out = p_in * (1.0 - b) - a
        if p_out < P_FLOOR:
            raise PropagationError("ranged out in material")
        new_p = p_out
        dq = (1.0 - b) * p_in ** 2 / p_out ** 2
    else:
        p_out = p
        p_in = (p_out + a) / (1.0 - b)
        new_p = p_in
        dq = p_out ** 2 / (p_in ** 2 * (1.0 - b))
    return q / new_p, dq, p_in, p_out, a + b * p_in


def material_noise(p5, slab, g, p_in: float, p_new: float, de: float, sigma_frac: float):
    """Covariance added at a slab in its local (cylinder) parameters."""
    theta = p5[3]
    x0 = slab_path_X0(slab, g)
    th0 = highland(p_in, x0)
    Q = np.zeros((5, 5))
    Q[2, 2] = (th0 / math.sin(theta)) ** 2
    Q[3, 3] = th0 ** 2
    Q[4, 4] = (sigma_frac * de / p_new ** 2) ** 2
    return Q, x0


def slabs_between(geom, r_from: float, r_to: float) -> list:
    slabs = list(geom.material_slabs) + [geom.calorimeter]
    lo, hi = min(r_from, r_to), max(r_from, r_to)
    inside = [s for s in slabs if lo < s.radius < hi]
    return sorted(inside, key=lambda s: s.radius, reverse=r_to < r_from)


def _surface_radius(surface: Surface) -> float:
    if surface.kind is SurfaceKind.PERIGEE:
        return 0.0
    return surface.radius


def propagate(params: TrackParameters, cov, target: Surface, field, geom=None,
              material_on: bool = False, tol: float = DEFAULT_TOL,
              with_jac: bool = True) -> PropagationResult:
    """Transport parameters (and optionally covariance) to ``target``.

    With ``material_on`` every barrel slab between start and target shifts
    qop by its mean loss and inflates the covariance with multiple
    scattering and straggling.  ``with_jac=False`` skips the Jacobian and
    covariance (both returned as None).
    """
    if not with_jac:
        cov = None
    surface = params.surface
    p = params.vector
    g_start = surface.to_global(p)[0]
    r_start = math.hypot(g_start[0], g_start[1])
    legs = slabs_between(geom, r_start, _surface_radius(target)) if (material_on and geom) else []
    C = None if cov is None else np.asarray(cov, dtype=float)
    J_total = np.eye(5)
    path = 0.0
    crossings = []
    for slab in legs:
        slab_surface = Surface.cylinder(slab.radius)
        g0 = surface.to_global(p)[0]
        direction = choose_direction(g0, slab_surface, field)
        try:
            p, J, s = transport_local(surface, p, slab_surface, field, direction, with_jac, tol)
        except PropagationError:
            raise
        path += s
        if with_jac:
            J_total = J @ J_total
        if C is not None:
            C = J @ C @ J.T
        g = slab_surface.to_global(p)[0]
        along = direction > 0
        new_qop, dq, p_in, p_out, de = energy_step(p[4], slab, along)
        p = p.copy()
        p[4] = new_qop
        Jm = np.eye(5)
        Jm[4, 4] = dq
        if with_jac:
            J_total = Jm @ J_total
        Q, x0 = material_noise(p, slab, g, p_in, 1.0 / abs(new_qop), de, slab.eloss_sigma_frac)
        if C is not None:
            C = Jm @ C @ Jm.T + Q
        crossings.append(MaterialCrossing(slab, x0, p_in, p_out))
        surface = slab_surface
    p, J, s = transport_local(surface, p, target, field, with_jac=with_jac, tol=tol)
    path += s
    if with_jac:
        J_total = J @ J_total
    else:
        J_total = None
    if C is not None:
        C = symmetrize(J @ C @ J.T)
    return PropagationResult(TrackParameters.from_vector(target, p), C, J_total, path, crossings)

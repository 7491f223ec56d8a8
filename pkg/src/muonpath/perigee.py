"""Backtracking to the beam line and combination with the inner tracker."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from muonpath.geomodel import wrap_angle
from muonpath.propagation import (PropagationError, energy_step, material_noise, slabs_between,
                                  transport_local)
from muonpath.surfaces import Surface, TrackParameters, check_covariance, symmetrize


@dataclass(frozen=True)
class EnergyLossParam:
    """Mean loss ``a + b p`` (GeV) with Gaussian straggling ``sigma_frac`` of the mean."""

    a: float
    b: float = 0.0
    sigma_frac: float = 0.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.sigma_frac < 0:
            raise ValueError("energy-loss parameters must be >= 0")
        if self.b >= 1:
            raise ValueError("radiative slope b must be < 1")

    @classmethod
    def from_slab(cls, slab) -> "EnergyLossParam":
        return cls(slab.eloss_a, slab.eloss_b, slab.eloss_sigma_frac)


def eloss_mean(p: float, param: EnergyLossParam) -> float:
    if p < 2.0:
        raise ValueError("momentum below the 2 GeV floor")
    return param.a + param.b * p


def eloss_sigma(p: float, param: EnergyLossParam) -> float:
    return param.sigma_frac * eloss_mean(p, param)


def fit_eloss_param(p_in, delta_e) -> EnergyLossParam:
    """Least-squares ``a + b p`` to sampled losses; sigma_frac from the scatter."""
    p_in = np.asarray(p_in, dtype=float)
    delta_e = np.asarray(delta_e, dtype=float)
    b, a = np.polyfit(p_in, delta_e, 1)
    mean = a + b * p_in
    frac = float(np.std((delta_e - mean) / mean))
    return EnergyLossParam(max(float(a), 0.0), max(float(b), 0.0), frac)


@dataclass
class SurfaceReport:
    at_spectrometer_entrance: tuple
    at_calorimeter_entrance: tuple | None = None
    at_perigee: tuple | None = None
    flagged: bool = False
    reason: str = ""

    @property
    def complete(self) -> bool:
        return self.at_calorimeter_entrance is not None and self.at_perigee is not None


def _leg(surface, p, C, target, field):
    p1, J, _ = transport_local(surface, p, target, field)
    return p1, symmetrize(J @ C @ J.T)


def backtrack(params: TrackParameters, cov, geom, field,
              eloss: EnergyLossParam | None = None) -> SurfaceReport:
    """Inward extrapolation from the spectrometer entrance to the perigee.

    At each slab the mean loss is added back to the momentum and the
    covariance picks up straggling and multiple scattering; ``eloss``
    overrides the calorimeter's own parameterisation.
    """
    report = SurfaceReport((params, np.asarray(cov, dtype=float)))
    surface = params.surface
    p = params.vector
    C = np.asarray(cov, dtype=float)
    calo_entrance = Surface.calorimeter_entrance(geom)
    try:
        for slab in slabs_between(geom, surface.radius, calo_entrance.radius):
            cyl = Surface.cylinder(slab.radius)
            p, C = _leg(surface, p, C, cyl, field)
            surface = cyl
            is_calo = slab is geom.calorimeter
            param = eloss if (is_calo and eloss is not None) else EnergyLossParam.from_slab(slab)
            new_qop, dq, p_in, _, de = energy_step(p[4], slab, False, (param.a, param.b))
            p = p.copy()
            p[4] = new_qop
            Jm = np.eye(5)
            Jm[4, 4] = dq
            g = cyl.to_global(p)[0]
            Q, _ = material_noise(p, slab, g, p_in, p_in, de, param.sigma_frac)
            C = symmetrize(Jm @ C @ Jm.T + Q)
        p, C = _leg(surface, p, C, calo_entrance, field)
        report.at_calorimeter_entrance = (TrackParameters.from_vector(calo_entrance, p), C)
        perigee = Surface.perigee()
        p, C = _leg(calo_entrance, p, C, perigee, field)
        report.at_perigee = (TrackParameters.from_vector(perigee, p), C)
    except (PropagationError, ValueError) as exc:
        report.flagged = True
        report.reason = str(exc)
    return report


@dataclass
class CombinedTrack:
    params: TrackParameters
    cov: np.ndarray
    match_chi2: float
    muon_id: int = -1
    inner_id: int = -1


def _weight(cov, name: str) -> np.ndarray:
    cov = check_covariance(cov, f"{name} covariance")
    try:
        np.linalg.cholesky(cov)
        return np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} covariance is singular") from exc


def combine(muon: tuple, inner: tuple, muon_id: int = -1, inner_id: int = -1) -> CombinedTrack:
    """Covariance-weighted mean of two perigee measurements."""
    (pm, Cm), (pi, Ci) = muon, inner
    Wm, Wi = _weight(Cm, "muon"), _weight(Ci, "inner")
    xm, xi = pm.vector, pi.vector.copy()
    if abs(xi[2] - xm[2]) > math.pi:
        xi[2] = xm[2] + wrap_angle(xi[2] - xm[2])
    C = symmetrize(np.linalg.inv(Wm + Wi))
    x = C @ (Wm @ xm + Wi @ xi)
    d = xm - xi
    chi2 = float(d @ np.linalg.solve(np.asarray(Cm) + np.asarray(Ci), d))
    return CombinedTrack(TrackParameters.from_vector(Surface.perigee(), x), C, max(chi2, 0.0),
                         muon_id, inner_id)


@dataclass(frozen=True)
class FakeDecision:
    accepted: bool
    match_chi2: float
    cut: float


def reject_fakes(combined: CombinedTrack, cut: float = 25.0) -> FakeDecision:
    return FakeDecision(combined.match_chi2 <= cut, combined.match_chi2, cut)


# --- toy inner tracker -------------------------------------------------------------

@dataclass(frozen=True)
class InnerTrackerConfig:
    """Perigee resolutions; qop relative width ``sqrt(a^2 + (b pt)^2)``."""

    sigma_d0: float = 20e-6
    sigma_z0: float = 100e-6
    sigma_phi: float = 2e-4
    sigma_theta: float = 5e-4
    qop_const: float = 0.005
    qop_slope: float = 1.5e-4
    enabled: bool = True

    def covariance(self, pt: float, qop: float) -> np.ndarray:
        rel = math.hypot(self.qop_const, self.qop_slope * pt)
        return np.diag([self.sigma_d0 ** 2, self.sigma_z0 ** 2, self.sigma_phi ** 2,
                        self.sigma_theta ** 2, (rel * qop) ** 2])


def truth_perigee(muon) -> np.ndarray:
    """Perigee vector of a truth muon (straight line from its vertex)."""
    vx, vy, vz = muon.vertex
    sp, cp = math.sin(muon.phi), math.cos(muon.phi)
    return np.array([-vx * sp + vy * cp, vz, muon.phi, muon.theta, muon.qop])


def simulate_inner_track(muon, cfg: InnerTrackerConfig, rng, kink: float = 0.0) -> dict:
    """Smeared perigee measurement; ``kink`` (rad) tilts the direction at random azimuth."""
    truth = truth_perigee(muon)
    cov = cfg.covariance(muon.pt, muon.qop)
    x = truth + rng.normal(0.0, np.sqrt(np.diag(cov)))
    if kink:
        psi = rng.uniform(0.0, 2.0 * math.pi)
        x[2] += kink * math.cos(psi) / math.sin(truth[3])
        x[3] += kink * math.sin(psi)
    x[3] = min(max(x[3], 1e-6), math.pi - 1e-6)
    return {"params": x.tolist(), "cov": cov.ravel().tolist()}


def inner_track_from_dict(d: dict) -> tuple:
    x = np.asarray(d["params"], dtype=float)
    return TrackParameters.from_vector(Surface.perigee(), x), np.asarray(d["cov"]).reshape(5, 5)

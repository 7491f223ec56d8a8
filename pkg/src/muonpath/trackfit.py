"""Momentum estimate, segment matching by momentum scan, and the global fits.

Fit parameters are the five local parameters at the spectrometer entrance
plus two scattering angles per spectrometer material slab, each with a
Gaussian prior of the Highland width.  Every objective evaluation tracks the
state through the field to each chamber plane.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from muonpath import _kernels
from muonpath.bfield import field_kernel
from muonpath.geomodel import StationLayer, decode_tube_id
from muonpath.hitmodel import fit_line, local_arc, strip_crossing
from muonpath.propagation import (PropagationError, energy_step, highland, propagate,
                                  slab_path_X0, transport_local)
from muonpath.segments import SegmentCandidate
from muonpath.surfaces import QOP_MAX, Surface, TrackParameters, check_covariance, symmetrize
from muonpath.toysim import DigitizationConfig, correct_drift_time, rt_radius

__all__ = [
    "Status", "ScanConfig", "FitConfig", "FitHit", "TrackCandidate", "estimate_momentum",
    "match_segments", "fit_candidate", "global_refit", "select_tracks", "propagate",
    "seed_candidates",
]

QOP_MIN = 1.0 / 5000.0
_STRAIGHT_ANGLE = 1e-4


class Status(enum.Enum):
    SEEDED = "Seeded"
    MATCHED = "Matched"
    FITTED = "Fitted"
    REFITTED = "Refitted"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class ScanConfig:
    n_points: int = 21
    span: float = 2.0
    match_cut: float = 25.0
    refine: bool = True

    def __post_init__(self):
        if self.n_points < 3 or self.span <= 1.0 or self.match_cut <= 0:
            raise ValueError("scan needs n_points >= 3, span > 1 and match_cut > 0")


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 50
    tol_chi2: float = 1e-4
    clean_cut: float = 4.0
    select_cut: float = 5.0
    min_hits: int = 6
    share_cut: float = 0.5
    road: float = 5e-3
    tube_resolution: float = 80e-6
    scattering: bool = True

    def __post_init__(self):
        if self.clean_cut <= 0 or self.select_cut <= 0 or self.road <= 0:
            raise ValueError("cuts and road must be > 0")


@dataclass
class FitHit:
    hit_index: int
    tube_id: int
    chamber_id: int
    u: float
    w: float
    radius: float = 0.0
    used: bool = True
    residual: float = 0.0


@dataclass
class TrackCandidate:
    segments: dict
    status: Status = Status.SEEDED
    qop_estimate: float = 0.0
    straight: bool = False
    scan_qop: float | None = None
    start: tuple | None = None  # (chamber id, plane parameters) the scan tracked from
    params: TrackParameters | None = None
    cov: np.ndarray | None = None
    chi2: float = 0.0
    ndof: int = 0
    hits: list = field(default_factory=list)
    n_strips: int = 0
    scatter: np.ndarray | None = None
    reason: str = ""
    match_chi2: dict = field(default_factory=dict)
    fit_time_ns: int = 0
    iterations: int = 0

    @property
    def chi2_ndof(self) -> float:
        return self.chi2 / self.ndof if self.ndof > 0 else math.inf

    @property
    def used_hits(self) -> list:
        return [h for h in self.hits if h.used]

    def hit_set(self) -> frozenset:
        if self.hits:
            return frozenset(h.hit_index for h in self.used_hits)
        return frozenset(i for s in self.segments.values() for i in s.hit_indices)

    def reject(self, reason: str) -> "TrackCandidate":
        self.status = Status.REJECTED
        self.reason = reason
        return self

    @property
    def chamber_ids(self) -> list[int]:
        return sorted(s.chamber_id for s in self.segments.values())


# --- geometry helpers -----------------------------------------------------------

def segment_global(geom, seg: SegmentCandidate):
    """Global point of a segment at its plane and its bending-plane angle."""
    ch = geom.chamber(seg.chamber_id)
    return ch.to_global((0.0, seg.second_coordinate, seg.w0)), seg.alpha


def plane_state_from_segment(geom, seg: SegmentCandidate, qop: float, v=None, w0=None,
                             alpha=None) -> np.ndarray:
    """Plane parameters of a track through a segment, pointing away from the beam line."""
    v = seg.second_coordinate if v is None else v
    w0 = seg.w0 if w0 is None else w0
    alpha = seg.alpha if alpha is None else alpha
    ch = geom.chamber(seg.chamber_id)
    centre, rot = ch.frame(aligned=True)
    x = centre + v * rot[:, 1] + w0 * rot[:, 2]
    phi_d = math.atan2(x[1], x[0])
    h = np.array([math.cos(phi_d), math.sin(phi_d), 0.0])
    hu, hw = float(h @ rot[:, 0]), float(h @ rot[:, 2])
    zu, zw = rot[2, 0], rot[2, 2]
    ca, sa = math.cos(alpha), math.sin(alpha)
    # T = rho h + tz z with (u, w) projection along (cos a, sin a)
    rho, tz = ca * zw - sa * zu, sa * hu - ca * hw
    if rho < 0:
        rho, tz = -rho, -tz
    return np.array([v, w0, phi_d, math.atan2(rho, tz), qop])


def plane_to_segment(geom, chamber_id: int, p5) -> np.ndarray:
    """(v, w, alpha) of a plane state, alpha being the (u, w) direction angle."""
    ch = geom.chamber(chamber_id)
    _, rot = ch.frame(aligned=True)
    st = math.sin(p5[3])
    T = np.array([math.cos(p5[2]) * st, math.sin(p5[2]) * st, math.cos(p5[3])])
    t = rot.T @ T
    return np.array([p5[0], p5[1], math.atan2(t[2], t[0])])


def _numeric_jac(fn, x, eps):
    x = np.asarray(x, dtype=float)
    f0 = fn(x)
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        d = np.zeros_like(x)
        d[k] = eps[k]
        J[:, k] = (fn(x + d) - fn(x - d)) / (2 * eps[k])
    return J


# --- momentum estimate ------------------------------------------------------------

def estimate_momentum(outer: SegmentCandidate, middle: SegmentCandidate, field,
                      geom) -> tuple[float, bool]:
    """qop from the bending-angle change between two segments.

    Returns (qop, straight) where ``straight`` flags a bending below 0.1 mrad
    (or no field along the chord), in which case ``|qop|`` is the minimum.
    """
    (x_o, a_o), (x_m, a_m) = segment_global(geom, outer), segment_global(geom, middle)
    # order along the flight direction
    if math.hypot(x_o[0], x_o[1]) < math.hypot(x_m[0], x_m[1]):
        (x_o, a_o), (x_m, a_m) = (x_m, a_m), (x_o, a_o)
    dlam = a_o - a_m
    kind, params, grid = field_kernel(field)
    chord = x_o - x_m
    length = float(np.linalg.norm(chord))
    bdl = 0.0
    for k in range(10):
        x = x_m + (k + 0.5) / 10.0 * chord
        b, _ = _kernels.field_eval(kind, params, grid, float(x[0]), float(x[1]), float(x[2]))
        phi = math.atan2(x[1], x[0])
        bdl += (-math.sin(phi) * b[0] + math.cos(phi) * b[1]) * length / 10.0
    sign = 1.0 if dlam * (bdl if bdl != 0 else 1.0) >= 0 else -1.0
    if abs(dlam) < _STRAIGHT_ANGLE or abs(bdl) < 1e-9:
        return sign * QOP_MIN, True
    qop = dlam / (_kernels.C_LIGHT * bdl)
    qop = math.copysign(min(max(abs(qop), QOP_MIN), 0.999 * QOP_MAX), qop)
    return qop, False


# --- matching -----------------------------------------------------------------------

def _seed_covariance(geom, seg: SegmentCandidate, qop: float) -> np.ndarray:
    """Plane-parameter covariance implied by a segment (qop held fixed)."""
    x = np.array([seg.second_coordinate, seg.w0, seg.alpha])
    J = _numeric_jac(lambda y: plane_state_from_segment(geom, seg, qop, *y), x,
                     [1e-4, 1e-6, 1e-7])
    C3 = np.zeros((3, 3))
    C3[0, 0] = seg.second_sigma ** 2
    C3[1:, 1:] = seg.cov
    return symmetrize(J @ C3 @ J.T)


def _segment_covariance(seg: SegmentCandidate) -> np.ndarray:
    C = np.zeros((3, 3))
    C[0, 0] = seg.second_sigma ** 2
    C[1:, 1:] = seg.cov
    return C


def _predict_plane(geom, field, start_id: int, p_start, target_id: int, with_cov=None):
    start = Surface.station_plane(geom.chamber(start_id))
    target = Surface.station_plane(geom.chamber(target_id))
    params = TrackParameters.from_vector(start, p_start)
    res = propagate(params, with_cov, target, field, geom, material_on=True,
                    with_jac=with_cov is not None)
    return res.params.vector, res.cov


def _match_chi2(geom, seg, p_pred, C_pred3) -> float:
    pred = plane_to_segment(geom, seg.chamber_id, p_pred)
    meas = np.array([seg.second_coordinate, seg.w0, seg.alpha])
    d = meas - pred
    C = _segment_covariance(seg) + C_pred3
    try:
        return float(d @ np.linalg.solve(C, d))
    except np.linalg.LinAlgError:
        return math.inf


def _in_chamber(geom, chamber_id, p5) -> bool:
    ch = geom.chamber(chamber_id)
    return abs(p5[0]) <= 0.5 * ch.tube_length + 0.1 and abs(p5[1]) <= ch.half_extent_w + 0.1


def match_segments(seed: TrackCandidate, all_segments, field, geom,
                   scan_cfg: ScanConfig = ScanConfig()) -> TrackCandidate:
    """Scan qop around the estimate, tracking from the start segment to the
    other stations; associate the best-matching segment per station."""
    layers = sorted(seed.segments)
    start_layer = StationLayer.MIDDLE if StationLayer.MIDDLE in seed.segments else layers[-1]
    start = seed.segments[start_layer]
    partners = {la: s for la, s in seed.segments.items() if la != start_layer}
    others: dict[StationLayer, list] = {}
    for s in all_segments:
        if s.layer not in seed.segments:
            others.setdefault(s.layer, []).append(s)
    targets = dict((la, [s]) for la, s in partners.items())
    targets.update(others)

    # propagated covariance per target chamber, computed once at the estimate
    q0 = seed.qop_estimate
    p0 = plane_state_from_segment(geom, start, q0)
    C0 = _seed_covariance(geom, start, q0)
    cov_pred = {}
    for la, segs in targets.items():
        for s in segs:
            if s.chamber_id in cov_pred:
                continue
            try:
                p_t, C_t = _predict_plane(geom, field, start.chamber_id, p0, s.chamber_id, C0)
            except (PropagationError, ValueError):
                cov_pred[s.chamber_id] = None
                continue
            Jm = _numeric_jac(lambda y: plane_to_segment(geom, s.chamber_id, y), p_t,
                              [1e-5, 1e-5, 1e-7, 1e-7, 1e-9])
            cov_pred[s.chamber_id] = symmetrize(Jm @ C_t @ Jm.T)

    def evaluate(qop):
        """Per-layer (chi2, segment) of the best match at this qop."""
        p_s = plane_state_from_segment(geom, start, qop)
        preds = {}
        best = {}
        for la, segs in targets.items():
            best[la] = (math.inf, None)
            for s in segs:
                if cov_pred.get(s.chamber_id) is None:
                    continue
                if s.chamber_id not in preds:
                    try:
                        preds[s.chamber_id] = _predict_plane(geom, field, start.chamber_id, p_s,
                                                             s.chamber_id)[0]
                    except (PropagationError, ValueError):
                        preds[s.chamber_id] = None
                p_t = preds[s.chamber_id]
                if p_t is None or not _in_chamber(geom, s.chamber_id, p_t):
                    continue
                c2 = _match_chi2(geom, s, p_t, cov_pred[s.chamber_id])
                if c2 < best[la][0]:
                    best[la] = (c2, s)
        return best

    def score(best):
        total = 0.0
        for la, (c2, _) in best.items():
            total += c2 if la in partners else min(c2, scan_cfg.match_cut)
        return total

    n = scan_cfg.n_points
    grid = [q0 * scan_cfg.span ** (2.0 * k / (n - 1) - 1.0) for k in range(n)]
    grid = [math.copysign(min(abs(q), 0.999 * QOP_MAX), q) for q in grid]
    scores = []
    for q in grid:
        scores.append(score(evaluate(q)))
    k_best = int(np.argmin(scores))
    seed.scan_qop = grid[k_best]
    q_best = grid[k_best]
    if scan_cfg.refine and math.isfinite(scores[k_best]):
        lo = math.log(abs(grid[max(k_best - 1, 0)]))
        hi = math.log(abs(grid[min(k_best + 1, n - 1)]))
        if hi < lo:
            lo, hi = hi, lo
        if hi > lo:
            sgn = math.copysign(1.0, q0)
            res = minimize_scalar(lambda y: score(evaluate(sgn * math.exp(y))), bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-6})
            if res.fun <= scores[k_best]:
                q_best = sgn * math.exp(res.x)
    best = evaluate(q_best)
    for la, (c2, s) in best.items():
        if s is None:
            continue
        seed.match_chi2[la] = c2
        if la in partners:
            continue
        if c2 <= scan_cfg.match_cut:
            seed.segments[la] = s
    seed.qop_estimate = q_best
    seed.start = (start.chamber_id, plane_state_from_segment(geom, start, q_best))
    pair_ok = all(best[la][0] <= scan_cfg.match_cut for la in partners)
    seed.status = Status.MATCHED
    if not pair_ok:
        seed.reject("pair mismatch")
    return seed


def seed_candidates(segments, field, geom) -> list[TrackCandidate]:
    """Strict outer+middle pairs; fallbacks when a layer has no segment."""
    by_layer: dict[StationLayer, list] = {}
    for s in segments:
        by_layer.setdefault(s.layer, []).append(s)
    O, M, I = StationLayer.OUTER, StationLayer.MIDDLE, StationLayer.INNER
    if by_layer.get(O) and by_layer.get(M):
        pairs = [(O, M)]
    elif by_layer.get(O) and by_layer.get(I):
        pairs = [(O, I)]
    elif by_layer.get(M) and by_layer.get(I):
        pairs = [(M, I)]
    else:
        return []
    out = []
    for la, lb in pairs:
        for a in by_layer[la]:
            for b in by_layer[lb]:
                qop, straight = estimate_momentum(a, b, field, geom)
                out.append(TrackCandidate({la: a, lb: b}, qop_estimate=qop, straight=straight))
    return out


# --- fitting machinery ----------------------------------------------------------------

class _Chain:
    """Entrance -> chamber planes, crossing the spectrometer slabs in radius order."""

    def __init__(self, geom, field, chamber_ids, scattering: bool):
        self.geom, self.field = geom, field
        self.entrance = Surface.spectrometer_entrance(geom)
        planes = [(Surface.station_plane(geom.chamber(c)), c) for c in sorted(set(chamber_ids))]
        r_max = max(p.radius for p, _ in planes)
        self.slabs = sorted([s for s in geom.material_slabs if s.radius < r_max],
                            key=lambda s: s.radius)
        items = [(p.radius, 1, p, c) for p, c in planes]
        items += [(s.radius, 0, s, -1) for s in self.slabs]
        self.items = sorted(items, key=lambda it: (it[0], it[1]))
        self.scattering = scattering
        self.n_par = 5 + (2 * len(self.slabs) if scattering else 0)

    def run(self, x, with_jac: bool):
        """Plane parameters (and d/dx) per chamber, plus Highland widths per slab."""
        p = np.asarray(x[:5], dtype=float)
        J = np.zeros((5, self.n_par))
        J[:, :5] = np.eye(5)
        surf = self.entrance
        out, widths = {}, []
        k_slab = 0
        for _, is_plane, obj, cid in self.items:
            target = obj if is_plane else Surface.cylinder(obj.radius)
            p, Jl, _ = transport_local(surf, p, target, self.field, 1, with_jac)
            if with_jac:
                J = Jl @ J
            surf = target
            if is_plane:
                out[cid] = (p.copy(), J.copy() if with_jac else None)
                continue
            g = target.to_global(p)[0]
            new_qop, dq, p_in, _, _ = energy_step(p[4], obj, True)
            p = p.copy()
            p[4] = new_qop
            if with_jac:
                J[4] *= dq
            widths.append(highland(p_in, slab_path_X0(obj, g)))
            if self.scattering:
                a, b = x[5 + 2 * k_slab], x[6 + 2 * k_slab]
                st, ct = math.sin(p[3]), math.cos(p[3])
                if with_jac:
                    Jk = np.eye(5)
                    Jk[2, 3] = -a * ct / st ** 2
                    J = Jk @ J
                    J[2, 5 + 2 * k_slab] += 1.0 / st
                    J[3, 6 + 2 * k_slab] += 1.0
                p[2] += a / st
                p[3] += b
            k_slab += 1
        return out, widths


def _levenberg(x0, model, max_iter: int, tol: float):
    """Gauss-Newton with Levenberg damping on whitened residuals.

    Returns (x, chi2, normal matrix, iterations, converged)."""
    x = np.asarray(x0, dtype=float)
    r, J = model(x)
    chi = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ r
        try:
            # chi2 decrease an undamped Gauss-Newton step would still give
            if float(g @ np.linalg.solve(A, g)) < 1e-8:
                converged = True
                break
        except np.linalg.LinAlgError:
            pass
        accepted = False
        while lam < 1e10:
            D = np.diag(np.maximum(np.diag(A), 1e-30))
            try:
                dx = np.linalg.solve(A + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            try:
                r_new, J_new = model(x + dx)
            except (PropagationError, ValueError):
                lam *= 10.0
                continue
            chi_new = float(r_new @ r_new)
            if chi_new <= chi:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # no descent direction left: at the minimum
            break
        dchi = chi - chi_new
        step2 = float(dx @ A @ dx)  # squared step in units of the parameter errors
        x, r, J, chi = x + dx, r_new, J_new, chi_new
        lam = max(lam * 0.1, 1e-12)
        if dchi < tol and step2 < 1e-8:
            converged = True
            break
    return x, chi, J.T @ J, it, converged


def _finish(cand: TrackCandidate, chain: _Chain, x, chi, A, n_meas: int, status: Status):
    try:
        full = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return cand.reject("degenerate geometry")
    cov = symmetrize(full[:5, :5])
    try:
        check_covariance(cov)
    except ValueError:
        return cand.reject("degenerate geometry")
    try:
        cand.params = TrackParameters.from_vector(chain.entrance, x[:5])
    except ValueError:
        return cand.reject("unphysical parameters")
    cand.cov = cov
    cand.scatter = x[5:].copy()
    cand.chi2 = chi
    cand.ndof = n_meas - 5
    cand.status = status
    return cand


def _initial_entrance(cand: TrackCandidate, geom, field) -> np.ndarray:
    cid, p = cand.start
    params = TrackParameters.from_vector(Surface.station_plane(geom.chamber(cid)), p)
    res = propagate(params, None, Surface.spectrometer_entrance(geom), field, geom,
                    material_on=True, with_jac=False)
    return res.params.vector


def _segment_prediction(geom, field, seg: SegmentCandidate, p5):
    arc = local_arc(geom.chamber(seg.chamber_id), p5, field)
    u, w, s = seg.arrays()
    _, signed, _, _ = arc.dca(u, w)
    pred_sr = np.sign(s) * np.abs(signed)
    w0, alpha, _, _ = fit_line(u, w, pred_sr, seg.w0, seg.alpha)
    return np.array([p5[0], w0, alpha])


_EPS5 = np.array([1e-5, 1e-6, 1e-7, 1e-7, 1e-9])


def fit_candidate(cand: TrackCandidate, field, geom, cfg: FitConfig = FitConfig(),
                  x0=None) -> TrackCandidate:
    """Least-squares fit of the matched segments (position, direction and
    strip coordinate) tracked from the spectrometer entrance."""
    t0 = time.perf_counter_ns()
    if cand.status is Status.REJECTED:
        return cand
    if len(cand.segments) < 2:
        return cand.reject("too few segments")
    segs = [cand.segments[la] for la in sorted(cand.segments)]
    chain = _Chain(geom, field, [s.chamber_id for s in segs], cfg.scattering)
    try:
        start = _initial_entrance(cand, geom, field) if x0 is None else np.asarray(x0[:5])
    except (PropagationError, ValueError):
        return cand.reject("no convergence")
    x_init = np.zeros(chain.n_par)
    x_init[:5] = start

    # whitening per segment: (v, w0, alpha) with the strip term only when measured
    whiten = {}
    for s in segs:
        C = _segment_covariance(s)
        if not s.has_strip:
            C = C[1:, 1:]
        whiten[s.chamber_id] = np.linalg.cholesky(np.linalg.inv(C)).T

    def model(x):
        planes, widths = chain.run(x, True)
        rows, jrows = [], []
        for s in segs:
            p5, Jp = planes[s.chamber_id]
            pred = _segment_prediction(geom, field, s, p5)
            D = _numeric_jac(lambda y: _segment_prediction(geom, field, s, y), p5, _EPS5)
            meas = np.array([s.second_coordinate, s.w0, s.alpha])
            res, Jr = pred - meas, D @ Jp
            if not s.has_strip:
                res, Jr = res[1:], Jr[1:]
            L = whiten[s.chamber_id]
            rows.append(L @ res)
            jrows.append(L @ Jr)
        r, J = _with_priors(rows, jrows, x, widths, chain)
        return r, J

    n_meas = sum(3 if s.has_strip else 2 for s in segs)
    try:
        x, chi, A, cand.iterations, ok = _levenberg(x_init, model, cfg.max_iter, cfg.tol_chi2)
    except (PropagationError, ValueError):
        return cand.reject("no convergence")
    cand.fit_time_ns = time.perf_counter_ns() - t0
    if not ok:
        return cand.reject("no convergence")
    return _finish(cand, chain, x, chi, A, n_meas, Status.FITTED)


def _with_priors(rows, jrows, x, widths, chain: _Chain):
    if chain.scattering:
        for k, th0 in enumerate(widths):
            for j in (5 + 2 * k, 6 + 2 * k):
                row = np.zeros((1, chain.n_par))
                row[0, j] = 1.0 / max(th0, 1e-12)
                rows.append(np.array([x[j] / max(th0, 1e-12)]))
                jrows.append(row)
    return np.concatenate(rows), np.vstack(jrows)


# --- global refit on raw hits ----------------------------------------------------------

def _collect_hits(event, geom, chamber_ids) -> list[FitHit]:
    out = []
    wanted = set(chamber_ids)
    for i, h in enumerate(event.drift_hits):
        cid, layer, index = decode_tube_id(h.tube_id)
        if cid not in wanted:
            continue
        ch = geom.chamber(cid)
        out.append(FitHit(i, h.tube_id, cid, ch.layer_u(layer), ch.tube_w(layer, index)))
    return out


def _strip_measurements(event, geom, chamber_ids):
    """(chamber id, plane, measured v) for every phi strip on the candidate's chambers."""
    out = []
    for h in event.trigger_hits:
        if h.phi_strip is None:
            continue
        plane = geom.trigger_plane(h.plane_id)
        if plane.chamber_id in chamber_ids:
            out.append((plane.chamber_id, plane, plane.phi_strip_v(h.phi_strip)))
    return out


def _hit_predictions(geom, field, cid, hits, p5):
    """Signed distances and along-wire coordinates of the track at each wire."""
    arc = local_arc(geom.chamber(cid), p5, field)
    u = np.array([h.u for h in hits])
    w = np.array([h.w for h in hits])
    _, signed, _, v = arc.dca(u, w)
    return signed, v


def global_refit(cand: TrackCandidate, event, rt, field, geom, cfg: FitConfig = FitConfig(),
                 digi: DigitizationConfig | None = None) -> TrackCandidate:
    """Refit on drift radii recomputed from raw times with the current track,
    plus phi strips; drop the worst hit beyond ``clean_cut`` sigma and refit
    until none is left."""
    t0 = time.perf_counter_ns()
    if cand.status is not Status.FITTED:
        return cand
    digi = digi or DigitizationConfig()
    chamber_ids = cand.chamber_ids
    chain = _Chain(geom, field, chamber_ids, cfg.scattering)
    x = np.zeros(chain.n_par)
    x[:5] = cand.params.vector
    if cand.scatter is not None and cand.scatter.size == chain.n_par - 5:
        x[5:] = cand.scatter
    sigma = cfg.tube_resolution
    hits = _collect_hits(event, geom, chamber_ids)
    strips = _strip_measurements(event, geom, chamber_ids)
    by_chamber: dict[int, list] = {}
    for h in hits:
        by_chamber.setdefault(h.chamber_id, []).append(h)

    def update_radii(x):
        planes, _ = chain.run(x, False)
        for cid, hs in by_chamber.items():
            signed, v = _hit_predictions(geom, field, cid, hs, planes[cid][0])
            for h, sd, vv in zip(hs, signed, v):
                t, _ = correct_drift_time(event.drift_hits[h.hit_index], float(vv), digi, field,
                                          geom)
                h.radius = rt_radius(rt, t)[0]
                h.residual = h.radius - abs(float(sd))

    # initial road: hits compatible with the segment-level track
    update_radii(x)
    for h in hits:
        h.used = abs(h.residual) < cfg.road
    # one hit per tube: the closer one (a delta ray shares its tube with the muon)
    best: dict[int, FitHit] = {}
    for h in hits:
        if h.used and (h.tube_id not in best or abs(h.residual) < abs(best[h.tube_id].residual)):
            best[h.tube_id] = h
    for h in hits:
        if h.used and best[h.tube_id] is not h:
            h.used = False

    def model(xv):
        planes, widths = chain.run(xv, True)
        rows, jrows = [], []
        for cid, hs in by_chamber.items():
            act = [h for h in hs if h.used]
            if not act:
                continue
            p5, Jp = planes[cid]
            f = lambda y: _hit_predictions(geom, field, cid, act, y)[0]
            signed = f(p5)
            D = _numeric_jac(f, p5, _EPS5)
            sg = np.where(signed >= 0, 1.0, -1.0)
            r_meas = np.array([h.radius for h in act])
            rows.append((np.abs(signed) - r_meas) / sigma)
            jrows.append((sg[:, None] * D) @ Jp / sigma)
        for cid, plane, v_meas in strips:
            p5, Jp = planes[cid]
            f = lambda y: np.array([strip_crossing(local_arc(geom.chamber(cid), y, field),
                                                   plane.u_offset)[0]])
            pred = f(p5)
            D = _numeric_jac(f, p5, _EPS5)
            sv = plane.phi_strip_pitch / math.sqrt(12.0)
            rows.append((pred - v_meas) / sv)
            jrows.append(D @ Jp / sv)
        return _with_priors(rows, jrows, xv, widths, chain)

    chi = math.inf
    A = None
    for _ in range(200):
        n_used = sum(h.used for h in hits)
        if n_used < cfg.min_hits:
            cand.hits = hits
            return cand.reject("too few hits")
        try:
            x, chi, A, _, ok = _levenberg(x, model, cfg.max_iter, cfg.tol_chi2)
        except (PropagationError, ValueError):
            return cand.reject("no convergence")
        if not ok:
            return cand.reject("no convergence")
        update_radii(x)
        used = [h for h in hits if h.used]
        worst = max(used, key=lambda h: abs(h.residual))
        if abs(worst.residual) <= cfg.clean_cut * sigma:
            break
        worst.used = False
    # radii moved slightly with the final along-wire coordinates; settle them
    x, chi, A, _, ok = _levenberg(x, model, cfg.max_iter, cfg.tol_chi2)
    update_radii(x)
    cand.hits = hits
    cand.n_strips = len(strips)
    cand.fit_time_ns += time.perf_counter_ns() - t0
    n_meas = sum(h.used for h in hits) + len(strips)
    return _finish(cand, chain, x, chi, A, n_meas, Status.REFITTED)


def select_tracks(cands, cfg: FitConfig = FitConfig()) -> list[TrackCandidate]:
    """Refitted candidates passing the chi2/ndof cut, one per shared-hit group."""
    good = [c for c in cands if c.status is Status.REFITTED and c.chi2_ndof <= cfg.select_cut]
    good.sort(key=lambda c: (c.chi2_ndof, -len(c.hit_set())))
    kept = []
    for c in good:
        ids = c.hit_set()
        if any(len(ids & k.hit_set()) > cfg.share_cut * min(len(ids), len(k.hit_set()))
               for k in kept):
            continue
        kept.append(c)
    return kept

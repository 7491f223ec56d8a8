"""Regions of activity and straight drift-tube segments per chamber."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from muonpath.geomodel import (StationLayer, chambers_in_roa, decode_tube_id, eta_phi, tube_line,
                               wrap_angle)
from muonpath.hitmodel import fit_line, line_residuals
from muonpath.toysim import DigitizationConfig, correct_drift_time, rt_radius

_MIRROR_ANGLE = 0.01  # rad; smaller differences are the same solution


@dataclass(frozen=True)
class Roa:
    eta_center: float
    phi_center: float
    half_width_eta: float = 0.2
    half_width_phi: float = 0.2

    def __post_init__(self):
        if self.half_width_eta < 0 or self.half_width_phi < 0:
            raise ValueError("ROA half widths must be >= 0")

    def contains(self, eta: float, phi: float, margin: float = 0.0) -> bool:
        return (abs(eta - self.eta_center) <= self.half_width_eta + margin
                and abs(wrap_angle(phi - self.phi_center)) <= self.half_width_phi + margin)


@dataclass(frozen=True)
class SegmentConfig:
    tube_resolution: float = 80e-6
    outlier_cut: float = 10.0
    min_hits: int = 4
    road: float = 1e-3
    max_per_chamber: int = 8
    share_cut: float = 0.5
    eta_margin: float = 0.05

    def __post_init__(self):
        if self.min_hits < 3:
            raise ValueError("min_hits must be >= 3")
        if self.tube_resolution <= 0 or self.road <= 0:
            raise ValueError("resolution and road must be > 0")


@dataclass
class SegmentHit:
    hit_index: int
    tube_id: int
    u: float
    w: float
    radius: float
    sign: int
    residual: float = 0.0

    @property
    def signed_radius(self) -> float:
        return self.sign * self.radius


@dataclass
class SegmentCandidate:
    """Straight line in the chamber bending plane ``(u, w)``.

    The line passes through ``(0, w0)`` with direction ``(cos alpha, sin alpha)``;
    ``cov`` is the 2x2 covariance of ``(w0, alpha)``.
    """

    chamber_id: int
    layer: StationLayer
    w0: float
    alpha: float
    chi2: float
    hits: list
    cov: np.ndarray
    second_coordinate: float = 0.0
    second_sigma: float = 1.0
    has_strip: bool = False

    @property
    def ndof(self) -> int:
        return len(self.hits) - 2

    @property
    def point(self) -> np.ndarray:
        return np.array([0.0, self.w0])

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.alpha), math.sin(self.alpha)])

    @property
    def hit_indices(self) -> frozenset:
        return frozenset(h.hit_index for h in self.hits)

    def arrays(self):
        u = np.array([h.u for h in self.hits])
        w = np.array([h.w for h in self.hits])
        s = np.array([h.signed_radius for h in self.hits])
        return u, w, s

    def to_dict(self) -> dict:
        return {"chamber": self.chamber_id, "station": self.layer.name.lower(),
                "point": [0.0, self.w0], "direction": list(self.direction), "chi2": self.chi2,
                "ndof": self.ndof, "hits": [h.tube_id for h in self.hits]}


def segment_chi2(point, direction, u, w, signed_r, sigma: float) -> tuple[float, int]:
    """chi2 of wires at (u, w) against a line given by a point and a direction."""
    point = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    dist = d[0] * (w - point[1]) - d[1] * (u - point[0])
    res = (dist - np.atleast_1d(signed_r)) / sigma
    return float(res @ res), int(u.size) - 2


# --- regions of activity -------------------------------------------------------

def trigger_point(geom, hit) -> np.ndarray | None:
    """Global position of a two-coordinate trigger hit, or None."""
    if hit.eta_strip is None or hit.phi_strip is None:
        return None
    plane = geom.trigger_plane(hit.plane_id)
    centre, rot = geom.chamber(plane.chamber_id).frame(aligned=True)
    return (centre + plane.u_offset * rot[:, 0] + plane.phi_strip_v(hit.phi_strip) * rot[:, 1]
            + plane.eta_strip_w(hit.eta_strip) * rot[:, 2])


def find_roas(trigger_hits, geom, half_width_eta: float = 0.2, half_width_phi: float = 0.2,
              merge_distance: float = 0.4) -> list[Roa]:
    """One window per cluster of two-coordinate trigger hits.

    Windows whose centres lie within ``merge_distance`` in both eta and phi
    are merged, the merged centre being the mean of its members.
    """
    pts = []
    for h in sorted(trigger_hits, key=lambda h: (h.plane_id, h.eta_strip or 0, h.phi_strip or 0)):
        x = trigger_point(geom, h)
        if x is not None:
            pts.append(eta_phi(x))
    clusters: list[list] = []
    for eta, phi in pts:
        for cl in clusters:
            ce, cp = _centre(cl)
            if abs(eta - ce) < merge_distance and abs(wrap_angle(phi - cp)) < merge_distance:
                cl.append((eta, phi))
                break
        else:
            clusters.append([(eta, phi)])
    # merging can bring two cluster centres close; repeat until stable
    merged = True
    while merged:
        merged = False
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                ei, pi = _centre(clusters[i])
                ej, pj = _centre(clusters[j])
                if abs(ei - ej) < merge_distance and abs(wrap_angle(pi - pj)) < merge_distance:
                    clusters[i] += clusters.pop(j)
                    merged = True
                    break
            if merged:
                break
    return [Roa(*_centre(cl), half_width_eta, half_width_phi) for cl in clusters]


def _centre(cluster) -> tuple[float, float]:
    eta = float(np.mean([c[0] for c in cluster]))
    ref = cluster[0][1]
    phi = wrap_angle(ref + float(np.mean([wrap_angle(c[1] - ref) for c in cluster])))
    return eta, phi


# --- segment finding -------------------------------------------------------------

def chamber_v_hypothesis(geom, chamber, roa: Roa, trigger_hits) -> tuple[float, float, bool]:
    """Along-wire coordinate at the chamber mid-plane.

    Mean of this chamber's phi strips projected radially from the beam line
    onto the mid-plane, else the ROA centre.  Returns (v, sigma_v, from_strips).
    """
    plane = geom.plane_for_chamber(chamber.id)
    centre, rot = chamber.frame(aligned=True)
    vs = []
    for h in trigger_hits:
        if plane is None or h.plane_id != plane.id or h.phi_strip is None:
            continue
        x = centre + plane.u_offset * rot[:, 0] + plane.phi_strip_v(h.phi_strip) * rot[:, 1]
        x[2] = 0.0
        c = centre.copy()
        c[2] = 0.0
        lam = float(c @ rot[:, 0]) / float(x @ rot[:, 0])
        vs.append(float((lam * x - c) @ rot[:, 1]))
    if vs:
        return float(np.mean(vs)), plane.phi_strip_pitch / math.sqrt(12.0), True
    dphi = wrap_angle(roa.phi_center - math.atan2(rot[1, 0], rot[0, 0]))
    return float(np.linalg.norm(centre[:2]) * math.tan(dphi)), 0.5 * chamber.tube_length, False


def chamber_hits(event, geom, rt, chamber, along_wire: float, digi: DigitizationConfig, field,
                 roa: Roa | None = None, eta_margin: float = 0.05) -> list[SegmentHit]:
    """Drift circles of one chamber from corrected times (unsigned).

    ``along_wire`` is the mid-plane coordinate; each layer gets it scaled
    radially, as for a track pointing back to the beam line.
    """
    out = []
    r_mid = float(np.linalg.norm(chamber.frame(aligned=True)[0][:2]))
    for i, h in enumerate(event.drift_hits):
        cid, layer, index = decode_tube_id(h.tube_id)
        if cid != chamber.id:
            continue
        if roa is not None:
            centre, _ = tube_line(geom, h.tube_id)
            eta, _ = eta_phi(centre)
            if abs(eta - roa.eta_center) > roa.half_width_eta + eta_margin:
                continue
        u = chamber.layer_u(layer)
        t, _ = correct_drift_time(h, along_wire * (1.0 + u / r_mid), digi, field, geom)
        r, _ = rt_radius(rt, t)
        out.append(SegmentHit(i, h.tube_id, u, chamber.tube_w(layer, index), r, 1))
    return out


def _tangent_lines(h1: SegmentHit, h2: SegmentHit):
    """Lines (w0, alpha) tangent to both drift circles, pointing outward in u."""
    c1 = np.array([h1.u, h1.w])
    c2 = np.array([h2.u, h2.w])
    d = c2 - c1
    D = float(np.linalg.norm(d))
    if D < 1e-9:
        return []
    e = d / D
    eperp = np.array([-e[1], e[0]])
    out = []
    for s1 in (1, -1):
        for s2 in (1, -1):
            q = (s2 * h2.radius - s1 * h1.radius) / D
            if abs(q) > 1.0:
                continue
            root = math.sqrt(1.0 - q * q)
            for pm in (1.0, -1.0):
                n = q * e + pm * root * eperp
                if n[1] <= 0:
                    continue
                c = float(n @ c1) - s1 * h1.radius
                out.append((c / n[1], math.atan2(-n[0], n[1])))
    return out


def _fit(hits, signs, w0, alpha):
    u = np.array([h.u for h in hits])
    w = np.array([h.w for h in hits])
    r = np.array([h.radius for h in hits])
    return fit_line(u, w, signs * r, w0, alpha)


def _flip_search(hits, signs, w0, alpha, chi_raw):
    """Greedy single-sign flips until no flip lowers the sum of squares."""
    improved = True
    while improved:
        improved = False
        for i in range(len(hits)):
            trial = signs.copy()
            trial[i] = -trial[i]
            tw0, ta, tchi, _ = _fit(hits, trial, w0, alpha)
            if tchi < chi_raw - 1e-15:
                signs, w0, alpha, chi_raw = trial, tw0, ta, tchi
                improved = True
    return signs, w0, alpha, chi_raw


def _fit_candidate(hits, w0, alpha, cfg: SegmentConfig):
    """Collect hits in the road of a seed line, fit, resolve signs, drop outliers."""
    sig2 = cfg.tube_resolution ** 2
    u = np.array([h.u for h in hits])
    w = np.array([h.w for h in hits])
    r = np.array([h.radius for h in hits])
    dist = line_residuals(w0, alpha, u, w, 0.0)
    sel = np.abs(np.abs(dist) - r) < cfg.road
    # one hit per tube: keep the best-fitting one (drops delta rays on the same tube)
    best: dict[int, int] = {}
    for i in np.flatnonzero(sel):
        k = hits[i].tube_id
        if k not in best or abs(abs(dist[i]) - r[i]) < abs(abs(dist[best[k]]) - r[best[k]]):
            best[k] = int(i)
    idx = sorted(best.values())
    if len(idx) < cfg.min_hits:
        return None
    chosen = [hits[i] for i in idx]
    signs = np.where(dist[idx] >= 0.0, 1.0, -1.0)
    w0, alpha, chi_raw, _ = _fit(chosen, signs, w0, alpha)
    signs, w0, alpha, chi_raw = _flip_search(chosen, signs, w0, alpha, chi_raw)
    while len(chosen) >= cfg.min_hits:
        res = line_residuals(w0, alpha, np.array([h.u for h in chosen]),
                             np.array([h.w for h in chosen]),
                             signs * np.array([h.radius for h in chosen]))
        if chi_raw / sig2 / (len(chosen) - 2) <= cfg.outlier_cut:
            break
        worst = int(np.argmax(np.abs(res)))
        chosen.pop(worst)
        signs = np.delete(signs, worst)
        if len(chosen) < cfg.min_hits:
            return None
        w0, alpha, chi_raw, _ = _fit(chosen, signs, w0, alpha)
        signs, w0, alpha, chi_raw = _flip_search(chosen, signs, w0, alpha, chi_raw)
    else:
        return None
    w0, alpha, chi_raw, JtJ = _fit(chosen, signs, w0, alpha)
    return chosen, signs, w0, alpha, chi_raw, JtJ


def segments_in_chamber(hits: list[SegmentHit], chamber, cfg: SegmentConfig) -> list:
    """All distinct segments in one chamber's drift circles, best first."""
    if len(hits) < cfg.min_hits:
        return []
    sig2 = cfg.tube_resolution ** 2
    layers_ml = chamber.layers_per_multilayer
    ml = [decode_tube_id(h.tube_id)[1] // layers_ml for h in hits]
    seen = set()
    found = []
    pairs = [(i, j) for i in range(len(hits)) for j in range(i + 1, len(hits)) if ml[i] != ml[j]]
    if len(set(ml)) < 2:
        # edge crossings can light a single multilayer: seed within it
        pairs = [(i, j) for i in range(len(hits)) for j in range(i + 1, len(hits))
                 if hits[i].u != hits[j].u]
    for i, j in pairs:
        for w0, alpha in _tangent_lines(hits[i], hits[j]):
            out = _fit_candidate(hits, w0, alpha, cfg)
            if out is None:
                continue
            chosen, signs, w0f, af, chi_raw, JtJ = out
            key = tuple(sorted((h.hit_index, int(s)) for h, s in zip(chosen, signs)))
            if key in seen:
                continue
            seen.add(key)
            seg_hits = []
            res = line_residuals(w0f, af, np.array([h.u for h in chosen]),
                                 np.array([h.w for h in chosen]),
                                 signs * np.array([h.radius for h in chosen]))
            for h, s, rr in zip(chosen, signs, res):
                seg_hits.append(SegmentHit(h.hit_index, h.tube_id, h.u, h.w, h.radius, int(s),
                                           float(rr)))
            try:
                cov = sig2 * np.linalg.inv(JtJ)
            except np.linalg.LinAlgError:
                continue
            found.append(SegmentCandidate(chamber.id, chamber.layer, w0f, af, chi_raw / sig2,
                                          seg_hits, cov))
    found.sort(key=lambda s: (-len(s.hits), s.chi2, s.w0))
    kept: list[SegmentCandidate] = []
    for seg in found:
        ids = seg.hit_indices
        clash = [k for k in kept
                 if len(ids & k.hit_indices) > cfg.share_cut * min(len(ids), len(k.hit_indices))]
        # one multilayer need not resolve the left-right ambiguity: keep mirror
        # solutions at a distinct angle and let the station matching choose
        mirror = (len({decode_tube_id(h.tube_id)[1] // layers_ml for h in seg.hits}) == 1
                  and all(k.hit_indices == ids and abs(k.alpha - seg.alpha) > _MIRROR_ANGLE
                          for k in clash))
        if clash and not mirror:
            continue
        kept.append(seg)
        if len(kept) >= cfg.max_per_chamber:
            break
    return kept


def find_segments(event, geom, rt, roa: Roa, cfg: SegmentConfig = SegmentConfig(),
                  field=None, digi: DigitizationConfig | None = None) -> list[SegmentCandidate]:
    """Segments in every chamber overlapping the ROA, ordered by chamber id."""
    digi = digi or DigitizationConfig()
    out = []
    for cid in sorted(chambers_in_roa(geom, roa)):
        chamber = geom.chamber(cid)
        v, sv, from_strips = chamber_v_hypothesis(geom, chamber, roa, event.trigger_hits)
        hits = chamber_hits(event, geom, rt, chamber, v, digi, field, roa, cfg.eta_margin)
        for seg in segments_in_chamber(hits, chamber, cfg):
            _refine_along_wire(seg, event, geom, chamber, v, digi, field, rt, cfg)
            seg.second_coordinate, seg.second_sigma, seg.has_strip = v, sv, from_strips
            out.append(seg)
    return out


def _refine_along_wire(seg: SegmentCandidate, event, geom, chamber, v_mid: float, digi, field,
                       rt, cfg: SegmentConfig) -> None:
    """Recompute the radii with the along-wire coordinate at each hit's closest
    approach to the fitted line (not at the layer plane) and refit once."""
    r_mid = float(np.linalg.norm(chamber.frame(aligned=True)[0][:2]))
    u = np.array([h.u for h in seg.hits])
    w = np.array([h.w for h in seg.hits])
    signs = np.array([h.sign for h in seg.hits], dtype=float)
    sa, ca = math.sin(seg.alpha), math.cos(seg.alpha)
    d = (w - seg.w0) * ca - u * sa
    u_close = u + d * sa
    r = np.empty(len(seg.hits))
    for k, h in enumerate(seg.hits):
        v = v_mid * (1.0 + u_close[k] / r_mid)
        t, _ = correct_drift_time(event.drift_hits[h.hit_index], v, digi, field, geom)
        r[k] = rt_radius(rt, t)[0]
    w0, alpha, chi_raw, JtJ = fit_line(u, w, signs * r, seg.w0, seg.alpha)
    try:
        cov = cfg.tube_resolution ** 2 * np.linalg.inv(JtJ)
    except np.linalg.LinAlgError:
        return
    res = line_residuals(w0, alpha, u, w, signs * r)
    for h, rr, res_k in zip(seg.hits, r, res):
        h.radius, h.residual = float(rr), float(res_k)
    seg.w0, seg.alpha, seg.chi2, seg.cov = w0, alpha, chi_raw / cfg.tube_resolution ** 2, cov

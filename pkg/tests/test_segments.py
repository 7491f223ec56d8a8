import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muonpath.geomodel import default_geometry, eta_phi, with_strip_pitch, without_material
from muonpath.segments import (Roa, SegmentConfig, SegmentHit, find_roas, find_segments,
                               segment_chi2, segments_in_chamber, trigger_point)
from muonpath.toysim import DigitizationConfig, GenerationSpec, TriggerHit, simulate_event

from oracles import best_line_fixed_signs, exhaustive_min_chi2, random_station_hits

SIGMA = 80e-6


# --- ROAs -------------------------------------------------------------------------

def test_no_trigger_hits(geom):
    assert find_roas([], geom) == []


def test_eta_only_hit_gives_no_roa(geom):
    assert find_roas([TriggerHit(3, 100, None)], geom) == []


def _hit_near(geom, eta, phi):
    """Two-coordinate hit on the middle-station plane closest to (eta, phi)."""
    best = None
    for plane in geom.trigger_planes:
        if plane.chamber_id < 16 or plane.chamber_id >= 32:
            continue
        ch = geom.chamber(plane.chamber_id)
        centre, rot = ch.frame()
        base = centre + plane.u_offset * rot[:, 0]
        # solve for the in-plane point along the (eta, phi) direction
        d = np.array([math.cos(phi), math.sin(phi), math.sinh(eta)])
        lam = float((base @ rot[:, 0]) / (d @ rot[:, 0]))
        x = lam * d - base
        strips = plane.strips_at(float(x @ rot[:, 1]), float(x @ rot[:, 2]))
        if strips is not None:
            h = TriggerHit(plane.id, strips[0], strips[1])
            e, p = eta_phi(trigger_point(geom, h))
            if best is None or abs(e - eta) + abs(p - phi) < best[0]:
                best = (abs(e - eta) + abs(p - phi), h)
    return best[1]


def test_single_coincidence_roa(geom):
    hit = _hit_near(geom, 0.5, 1.0)
    roas = find_roas([hit], geom)
    assert len(roas) == 1
    r = roas[0]
    assert r.eta_center == pytest.approx(0.5, abs=5e-3)
    assert r.phi_center == pytest.approx(1.0, abs=5e-3)
    assert (r.half_width_eta, r.half_width_phi) == (0.2, 0.2)


def test_roa_merging_and_order(geom):
    hits = [_hit_near(geom, 0.5, 1.0), _hit_near(geom, 0.52, 1.01), _hit_near(geom, -0.3, -2.0)]
    a = find_roas(hits, geom)
    b = find_roas(list(reversed(hits)), geom)
    assert len(a) == 2
    assert [(r.eta_center, r.phi_center) for r in a] == [(r.eta_center, r.phi_center) for r in b]


# --- segment chi2 -------------------------------------------------------------------

def test_chi2_tangent_is_zero():
    u = np.array([-0.1, 0.0, 0.1])
    w = np.array([0.01, 0.0, -0.01])
    # line w = 0.005 (direction along u): signed distances w - 0.005
    chi2, ndof = segment_chi2((0.0, 0.005), (1.0, 0.0), u, w, w - 0.005, SIGMA)
    assert chi2 == pytest.approx(0.0, abs=1e-20) and ndof == 1


def test_chi2_single_hit_one_sigma():
    chi2, ndof = segment_chi2((0.0, 0.0), (1.0, 0.0), [0.0], [0.004 + SIGMA], [0.004], SIGMA)
    assert chi2 == pytest.approx(1.0, rel=1e-9) and ndof == -1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.015, 0.015)),
                min_size=1, max_size=8),
       st.floats(-1.0, 1.0), st.floats(-0.1, 0.1))
def test_chi2_matches_cross_product_distance(hits, alpha, w0):
    u, w, sr = (np.array(c) for c in zip(*hits))
    d = np.array([math.cos(alpha), math.sin(alpha)])
    chi2, _ = segment_chi2((0.0, w0), d, u, w, sr, SIGMA)
    # signed distance as the z component of d x (p - point)
    dist = d[0] * (w - w0) - d[1] * u
    expect = sum(((di - si) / SIGMA) ** 2 for di, si in zip(dist, sr))
    assert chi2 == pytest.approx(expect, rel=1e-12, abs=1e-12)


# --- segments in a chamber ------------------------------------------------------------

def test_best_chi2_equals_exhaustive(geom):
    rng = np.random.default_rng(12)
    for _ in range(30):
        ch = geom.chamber(int(rng.integers(48)))
        hits, _, _ = random_station_hits(ch, rng)
        segs = segments_in_chamber(hits, ch, SegmentConfig())
        assert len(segs[0].hits) == len(hits)
        assert abs(segs[0].chi2 - exhaustive_min_chi2(hits, SIGMA)) <= 1e-9


def test_sign_local_optimality(geom):
    rng = np.random.default_rng(3)
    for _ in range(30):
        ch = geom.chamber(int(rng.integers(48)))
        hits, _, _ = random_station_hits(ch, rng, max_hits=12)
        for seg in segments_in_chamber(hits, ch, SegmentConfig()):
            u, w, s = seg.arrays()
            for i in range(len(s)):
                flipped = s.copy()
                flipped[i] = -flipped[i]
                assert best_line_fixed_signs(u, w, flipped) / SIGMA ** 2 >= seg.chi2 - 1e-9


def test_delta_ray_excluded(geom):
    rng = np.random.default_rng(8)
    ch = geom.chamber(21)
    n_done = 0
    while n_done < 20:
        hits, _, _ = random_station_hits(ch, rng)
        if len(hits) != 6 or hits[2].radius < 3e-3:
            continue
        victim = hits[2]
        delta = SegmentHit(99, victim.tube_id, victim.u, victim.w,
                           victim.radius * rng.uniform(0.0, 0.7), 1)
        segs = segments_in_chamber(hits + [delta], ch, SegmentConfig())
        assert 99 not in segs[0].hit_indices and len(segs[0].hits) == 6
        n_done += 1


def test_translation_invariance(geom):
    rng = np.random.default_rng(5)
    ch = geom.chamber(40)
    du, dw = 0.013, -0.021
    for _ in range(10):
        hits, _, _ = random_station_hits(ch, rng)
        moved = [SegmentHit(h.hit_index, h.tube_id, h.u + du, h.w + dw, h.radius, 1) for h in hits]
        a = segments_in_chamber(hits, ch, SegmentConfig())[0]
        b = segments_in_chamber(moved, ch, SegmentConfig())[0]
        assert b.alpha == pytest.approx(a.alpha, abs=1e-10)
        assert b.chi2 == pytest.approx(a.chi2, rel=1e-6, abs=1e-8)
        assert b.w0 == pytest.approx(a.w0 + dw - math.tan(a.alpha) * du, abs=1e-10)


def test_too_few_hits(geom):
    ch = geom.chamber(0)
    rng = np.random.default_rng(0)
    hits, _, _ = random_station_hits(ch, rng)
    assert segments_in_chamber(hits[:3], ch, SegmentConfig()) == []


def test_single_multilayer_keeps_mirror_solution(geom):
    """Four circles in one multilayer have two exact tangents; both survive."""
    ch = geom.chamber(15)
    w0, alpha = 3.29913208664368, 0.6326233997962979
    hits = []
    for layer in range(ch.layers_per_multilayer):
        u = ch.layer_u(layer)
        idx = ch.nearest_tube(layer, w0 + math.tan(alpha) * u)
        wt = ch.tube_w(layer, idx)
        d = abs(math.cos(alpha) * (wt - w0) - math.sin(alpha) * u)
        hits.append(SegmentHit(len(hits), ch.tube_id(layer, idx), u, wt, d, 1))
    segs = segments_in_chamber(hits, ch, SegmentConfig())
    assert len(segs) == 2 and all(s.chi2 < 1e-12 for s in segs)
    assert min(abs(s.alpha - alpha) for s in segs) < 1e-9


# --- full finder on simulated events -------------------------------------------------

def _noiseless_setup():
    geom = with_strip_pitch(without_material(default_geometry()), 1e-5)
    return geom, DigitizationConfig.noiseless()


def _local_alpha(ch, g):
    t = ch.frame()[1].T @ g[3:6]
    return math.atan2(t[2], t[0])


def test_noiseless_one_segment_per_station(toroid, rt):
    geom, digi = _noiseless_setup()
    spec = GenerationSpec(pt_range=(10, 100))
    for seed in range(40):
        ev, trajs = simulate_event(geom, toroid, rt, digi, spec, seed, material_on=False)
        roas = find_roas(ev.trigger_hits, geom)
        assert len(roas) == 1
        segs = find_segments(ev, geom, rt, roas[0], SegmentConfig(), toroid, digi)
        crossings = {c.chamber_id: c for c in trajs[0].chamber_crossings()}
        by_chamber = {}
        for s in segs:
            by_chamber.setdefault(s.chamber_id, []).append(s)
        for cid, cr in crossings.items():
            assert len(by_chamber.get(cid, [])) >= 1
            best = by_chamber[cid][0]
            assert abs(best.alpha - _local_alpha(geom.chamber(cid), cr.g)) < 0.5e-3
        # stations counted once: no extra chambers beyond the crossed ones carry segments
        layers = [geom.chamber(c).layer for c in by_chamber]
        assert len(set(layers)) == len(crossings)

import copy
import math
from dataclasses import replace

import numpy as np
import pytest

from muonpath.bfield import NoField, UniformField
from muonpath.geomodel import (StationLayer, default_geometry, with_strip_pitch,
                               without_material)
from muonpath.segments import SegmentCandidate, SegmentConfig, find_roas, find_segments
from muonpath.surfaces import Surface, check_covariance
from muonpath.toysim import DigitizationConfig, GenerationSpec, TruthMuon, simulate_event
from muonpath.trackfit import (FitConfig, FitHit, QOP_MIN, ScanConfig, Status, TrackCandidate,
                               estimate_momentum, fit_candidate, global_refit, match_segments,
                               seed_candidates, select_tracks)

K = 0.299792458


# --- momentum estimate ------------------------------------------------------------

def _segment(geom, cid, w0, alpha):
    ch = geom.chamber(cid)
    return SegmentCandidate(cid, ch.layer, w0, alpha, 0.0, [], np.eye(2) * 1e-10)


def _helix_segments(qop, b=1.0, a0=0.3):
    """Segments of an x-z plane helix in a uniform field along y (sector 0),
    stations 2 m apart."""
    geom = default_geometry(scale=0.8)
    mid, out = geom.chamber(16), geom.chamber(32)
    assert math.isclose(out.frame()[0][0] - mid.frame()[0][0], 2.0)
    k = K * qop * b

    def at(x):
        a = math.asin(math.sin(a0) + k * x)
        return (math.cos(a0) - math.cos(a)) / k, a

    segs = []
    for ch in (out, mid):
        z, a = at(ch.frame()[0][0])
        segs.append(_segment(geom, ch.id, z, a))
    return geom, segs


def test_zero_field_is_straight():
    geom, (o, m) = _helix_segments(1 / 20)
    qop, straight = estimate_momentum(o, m, NoField(), geom)
    assert straight
    assert abs(qop) == pytest.approx(QOP_MIN)


def test_uniform_field_helix_estimate():
    geom, (o, m) = _helix_segments(1 / 20)
    qop, straight = estimate_momentum(o, m, UniformField((0.0, 1.0, 0.0)), geom)
    assert not straight
    assert qop == pytest.approx(1 / 20, rel=0.15)


def test_charge_flip_flips_sign():
    field = UniformField((0.0, 1.0, 0.0))
    # launched along x the two charges are mirror images in z
    geom, (o, m) = _helix_segments(1 / 20, a0=0.0)
    _, (o2, m2) = _helix_segments(-1 / 20, a0=0.0)
    q1, _ = estimate_momentum(o, m, field, geom)
    q2, _ = estimate_momentum(o2, m2, field, geom)
    assert q2 == pytest.approx(-q1, rel=1e-12)


def test_straight_below_threshold():
    geom = default_geometry(scale=0.8)
    o = _segment(geom, 32, 0.1, 0.2)
    m = _segment(geom, 16, 0.0, 0.2 - 5e-5)
    qop, straight = estimate_momentum(o, m, UniformField((0.0, 1.0, 0.0)), geom)
    assert straight and abs(qop) == pytest.approx(QOP_MIN)


# --- noiseless chain ------------------------------------------------------------------

NOISELESS = DigitizationConfig.noiseless()


@pytest.fixture(scope="module")
def clean_geom():
    return with_strip_pitch(without_material(default_geometry()), 1e-5)


def _event(geom, field, rt, seed, muons=None):
    spec = GenerationSpec(pt_range=(10, 100), muons_per_event=len(muons) if muons else 1)
    return simulate_event(geom, field, rt, NOISELESS, spec, seed, material_on=False, muons=muons)


def _matched(geom, field, rt, ev):
    out = []
    for roa in find_roas(ev.trigger_hits, geom):
        segs = find_segments(ev, geom, rt, roa, SegmentConfig(), field, NOISELESS)
        for c in seed_candidates(segs, field, geom):
            out.append(match_segments(c, segs, field, geom))
    return out


def _truth_entrance(geom, traj):
    return Surface.spectrometer_entrance(geom).to_local(traj.at("spectrometer_entrance").g)[0]


@pytest.fixture(scope="module")
def noiseless_events(clean_geom, toroid, rt):
    out = []
    for seed in range(6):
        ev, trajs = _event(clean_geom, toroid, rt, seed)
        cands = _matched(clean_geom, toroid, rt, ev)
        out.append((ev, trajs, cands))
    return out


def test_single_muon_all_stations_matched(noiseless_events, clean_geom):
    for ev, trajs, cands in noiseless_events:
        crossed = {c.chamber_id for c in trajs[0].chamber_crossings()}
        assert len(crossed) == 3
        best = min(cands, key=lambda c: sum(c.match_chi2.values()))
        assert best.status is Status.MATCHED
        assert set(best.chamber_ids) == crossed
        # every associated segment is built from this muon's hits
        for s in best.segments.values():
            assert all(ev.drift_hits[i].muon_index == 0 for i in s.hit_indices)


def test_two_muons_not_cross_associated(clean_geom, toroid, rt):
    muons = [TruthMuon(1, 30.0, 0.2, 0.3), TruthMuon(-1, 25.0, -0.1, 2.4)]
    ev, trajs = _event(clean_geom, toroid, rt, 11, muons)
    cands = [c for c in _matched(clean_geom, toroid, rt, ev) if c.status is Status.MATCHED]
    assert cands
    seen = set()
    for c in cands:
        owners = {ev.drift_hits[i].muon_index for s in c.segments.values() for i in s.hit_indices}
        assert len(owners) == 1
        seen |= owners
    assert seen == {0, 1}


def test_scan_grid_containing_truth_picks_it(noiseless_events, clean_geom, toroid):
    ev, trajs, cands = noiseless_events[0]
    truth_q = _truth_entrance(clean_geom, trajs[0])[4]
    best = min(cands, key=lambda c: sum(c.match_chi2.values()))
    seed = TrackCandidate({la: best.segments[la] for la in (StationLayer.OUTER,
                                                           StationLayer.MIDDLE)},
                          qop_estimate=truth_q * 1.3)
    all_segs = list(best.segments.values())
    # the geometric grid with span 1.3 over 3 points has the truth at one end
    out = match_segments(seed, all_segs, toroid, clean_geom,
                         ScanConfig(n_points=3, span=1.3, refine=False))
    assert out.scan_qop == pytest.approx(truth_q, rel=1e-12)


def _with_exact_segments(cand, trajs, geom, field):
    """Copy of ``cand`` whose segments carry the exact truth measurement (no strip
    quantisation)."""
    from muonpath.trackfit import _segment_prediction
    c = copy.deepcopy(cand)
    cross = {cr.chamber_id: cr for cr in trajs[0].chamber_crossings()}
    for la, s in c.segments.items():
        v, w0, alpha = _segment_prediction(geom, field, s, cross[s.chamber_id].local)
        c.segments[la] = replace(s, second_coordinate=float(v), w0=float(w0), alpha=float(alpha))
    return c


def test_fit_from_truth_converges_at_once(noiseless_events, clean_geom, toroid):
    for ev, trajs, cands in noiseless_events:
        best = min(cands, key=lambda c: sum(c.match_chi2.values()))
        c = _with_exact_segments(best, trajs, clean_geom, toroid)
        truth = _truth_entrance(clean_geom, trajs[0])
        fit_candidate(c, toroid, clean_geom, x0=truth)
        assert c.status is Status.FITTED
        assert c.iterations <= 2
        assert c.chi2 <= 1e-6
        check_covariance(c.cov)


def test_fit_recovers_qop_from_offset(noiseless_events, clean_geom, toroid):
    for ev, trajs, cands in noiseless_events:
        best = min(cands, key=lambda c: sum(c.match_chi2.values()))
        truth = _truth_entrance(clean_geom, trajs[0])
        start = truth.copy()
        start[4] *= 1.2
        c = fit_candidate(copy.deepcopy(best), toroid, clean_geom, x0=start)
        assert c.status is Status.FITTED
        assert c.params.vector[4] == pytest.approx(truth[4], rel=1e-4)


def test_refit_agrees_with_fit_without_noise(noiseless_events, clean_geom, toroid, rt):
    for ev, trajs, cands in noiseless_events:
        best = min(cands, key=lambda c: sum(c.match_chi2.values()))
        fitted = fit_candidate(copy.deepcopy(best), toroid, clean_geom)
        assert fitted.status is Status.FITTED
        q_fit = fitted.params.vector[4]
        refit = global_refit(copy.deepcopy(fitted), ev, rt, toroid, clean_geom,
                             FitConfig(), NOISELESS)
        assert refit.status is Status.REFITTED
        assert refit.params.vector[4] == pytest.approx(q_fit, rel=1e-6)
        assert all(h.used for h in refit.hits if ev.drift_hits[h.hit_index].muon_index == 0)
        check_covariance(refit.cov)


def test_refit_drops_background_hit(noiseless_events, clean_geom, toroid, rt):
    ev, trajs, cands = noiseless_events[1]
    best = min(cands, key=lambda c: sum(c.match_chi2.values()))
    fitted = fit_candidate(copy.deepcopy(best), toroid, clean_geom)
    # a background hit in a tube the muon crossed: 1 mm too short a radius
    # (inside the road, far outside 4 sigma)
    ev = copy.deepcopy(ev)
    h0 = next(h for h in ev.drift_hits if h.muon_index == 0)
    bkg = replace(h0, raw_time=h0.raw_time - 1e-3 / 20e-6, is_background=True, muon_index=-1)
    ev.drift_hits.append(bkg)
    refit = global_refit(fitted, ev, rt, toroid, clean_geom, FitConfig(), NOISELESS)
    assert refit.status is Status.REFITTED
    by_index = {h.hit_index: h for h in refit.hits}
    assert not by_index[len(ev.drift_hits) - 1].used
    for h in refit.used_hits:
        assert not ev.drift_hits[h.hit_index].is_background


def test_refit_too_few_hits(noiseless_events, clean_geom, toroid, rt):
    ev, trajs, cands = noiseless_events[2]
    best = min(cands, key=lambda c: sum(c.match_chi2.values()))
    fitted = fit_candidate(copy.deepcopy(best), toroid, clean_geom)
    out = global_refit(fitted, ev, rt, toroid, clean_geom, FitConfig(min_hits=1000), NOISELESS)
    assert out.status is Status.REJECTED and out.reason == "too few hits"


def test_fit_rejects_single_segment(noiseless_events, clean_geom, toroid):
    _, _, cands = noiseless_events[0]
    c = copy.deepcopy(cands[0])
    c.segments = dict(list(c.segments.items())[:1])
    assert fit_candidate(c, toroid, clean_geom).reason == "too few segments"


# --- selection -------------------------------------------------------------------------

def _refitted(hit_ids, chi2, ndof=10):
    c = TrackCandidate({}, status=Status.REFITTED, chi2=chi2, ndof=ndof)
    c.hits = [FitHit(i, i, 0, 0.0, 0.0) for i in hit_ids]
    return c


def test_select_empty():
    assert select_tracks([]) == []


def test_select_cuts_garbage():
    good, bad = _refitted(range(10), 10.0), _refitted(range(20, 30), 500.0)
    assert select_tracks([good, bad]) == [good]


def test_select_keeps_one_of_duplicates():
    a = _refitted(range(12), 12.0)
    b = _refitted(range(2, 14), 9.0)
    c = _refitted(range(40, 52), 11.0)
    kept = select_tracks([a, b, c])
    assert kept == [b, c]


def test_select_ignores_unrefitted():
    c = _refitted(range(10), 1.0)
    c.status = Status.FITTED
    assert select_tracks([c]) == []


def test_duplicates_from_overlapping_roas(noiseless_events, clean_geom, toroid, rt):
    """The same muon reconstructed from two ROAs yields a single survivor."""
    ev, trajs, cands = noiseless_events[3]
    best = min(cands, key=lambda c: sum(c.match_chi2.values()))
    fits = []
    for _ in range(2):
        c = fit_candidate(copy.deepcopy(best), toroid, clean_geom)
        fits.append(global_refit(c, ev, rt, toroid, clean_geom, FitConfig(), NOISELESS))
    assert all(f.status is Status.REFITTED for f in fits)
    assert len(select_tracks(fits)) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(n_points=2)
    with pytest.raises(ValueError):
        ScanConfig(span=1.0)
    with pytest.raises(ValueError):
        FitConfig(clean_cut=0.0)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muonpath.bfield import NoField, UniformField
from muonpath.geomodel import decode_tube_id, default_geometry, tube_line, without_material
from muonpath.toysim import (DigitizationConfig, DriftHit, Event, GenerationSpec, RtRelation,
                             TruthMuon, correct_drift_time, default_rt, digitize, generate_muons,
                             load_rt, propagate_truth, rt_radius, rt_time, save_rt,
                             simulate_event, splitmix64)

ALL_OFF = DigitizationConfig.noiseless(time_of_flight=False, signal_propagation=False,
                                       lorentz_coefficient=0.0)


def test_splitmix64_reference():
    # first outputs of the reference generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


# --- generation ---------------------------------------------------------------

def test_generate_zero():
    assert generate_muons(GenerationSpec(), 0, 1) == []


def test_generate_degenerate_ranges():
    spec = GenerationSpec(pt_range=(20, 20), eta_range=(0.3, 0.3), phi_range=(1.0, 1.0))
    mus = generate_muons(spec, 6, 5)
    assert {(m.pt, m.eta, m.phi) for m in mus} == {(20.0, 0.3, 1.0)}
    assert [m.charge for m in mus] == [1, -1, 1, -1, 1, -1]


def test_generate_mean_pt():
    mus = generate_muons(GenerationSpec(pt_range=(10, 100)), 10_000, 11)
    assert abs(np.mean([m.pt for m in mus]) - 55.0) < 3.0


def test_generate_reproducible():
    a = generate_muons(GenerationSpec(charge="random"), 20, 3)
    assert a == generate_muons(GenerationSpec(charge="random"), 20, 3)


def test_empty_range():
    with pytest.raises(ValueError):
        GenerationSpec(eta_range=(1.0, -1.0))
    with pytest.raises(ValueError):
        GenerationSpec(pt_range=(0.0, 10.0))
    with pytest.raises(ValueError):
        TruthMuon(0, 10.0, 0.0, 0.0)


# --- RT -------------------------------------------------------------------------

def test_rt_anchor_and_knots():
    rt = RtRelation(np.array([0.0, 100.0, 400.0, 700.0]),
                    np.array([0.0, 3e-3, 10e-3, 14.6e-3]))
    assert rt_radius(rt, 0.0) == (0.0, False)
    for t, r in zip(rt.times, rt.radii):
        assert rt_radius(rt, t)[0] == r
        assert rt_time(rt, r) == t
    assert rt_radius(rt, 800.0) == (rt.r_max, True)
    assert rt_radius(rt, -5.0)[1]


def test_rt_roundtrip_random():
    rt = RtRelation(np.array([0.0, 100.0, 400.0, 700.0]),
                    np.array([0.0, 3e-3, 10e-3, 14.6e-3]))
    rng = np.random.default_rng(2)
    for r in rng.uniform(0, rt.r_max, 100):
        assert abs(rt_radius(rt, rt_time(rt, r))[0] - r) <= 1e-12


def test_rt_invalid():
    with pytest.raises(ValueError):
        RtRelation(np.array([0.0, 10.0, 5.0]), np.array([0.0, 1e-3, 2e-3]))
    with pytest.raises(ValueError):
        RtRelation(np.array([1.0, 10.0]), np.array([0.0, 1e-3]))


def test_rt_file_roundtrip(tmp_path):
    rt = default_rt()
    path = tmp_path / "rt.txt"
    save_rt(rt, path)
    assert path.read_text().splitlines()[0] == "muonpath-rt/1"
    again = load_rt(path)
    np.testing.assert_allclose(again.radii, rt.radii, rtol=1e-15)
    np.testing.assert_array_equal(again.times, rt.times)


# --- truth propagation ------------------------------------------------------------

def test_free_particle_collinear():
    geom = without_material(default_geometry())
    mu = TruthMuon(1, 20.0, 0.4, 0.3)
    traj = propagate_truth(geom, NoField(), mu, material_on=False)
    pts = np.array([c.g[:3] for c in traj.crossings])
    assert len(traj.chamber_crossings()) == 3
    d = np.array([math.cos(mu.phi) * math.sin(mu.theta), math.sin(mu.phi) * math.sin(mu.theta),
                  math.cos(mu.theta)])
    for p in pts:
        assert np.linalg.norm(np.cross(p, d)) <= 1e-9


def test_uniform_field_on_helix():
    geom = without_material(default_geometry())
    B = 0.5
    mu = TruthMuon(-1, 20.0, 0.5, 0.2)
    traj = propagate_truth(geom, UniformField((0, 0, B)), mu, material_on=False)
    kappa = 0.299792458 * mu.qop * B
    st_, ct = math.sin(mu.theta), math.cos(mu.theta)
    for c in traj.crossings:
        s = c.g[2] / ct
        x = st_ / kappa * (math.sin(mu.phi) - math.sin(mu.phi - kappa * s))
        y = st_ / kappa * (math.cos(mu.phi - kappa * s) - math.cos(mu.phi))
        assert math.hypot(c.g[0] - x, c.g[1] - y) <= 1e-5


def test_high_momentum_calorimeter_loss(geom, toroid):
    mu = TruthMuon(1, 500.0, 0.0, 0.5)
    calo = geom.calorimeter
    de = calo.eloss_a + calo.eloss_b * mu.p
    sigma = calo.eloss_sigma_frac * de
    for seed in range(20):
        traj = propagate_truth(geom, toroid, mu, material_on=True, seed=seed)
        p_entr = traj.at("spectrometer_entrance").momentum
        assert abs(p_entr - (mu.p - de)) <= 5 * sigma


def test_mean_only_momentum_non_increasing(geom, toroid):
    for pt in (5.0, 20.0, 200.0):
        traj = propagate_truth(geom, toroid, TruthMuon(1, pt, 0.2, 1.0), True, 0, mean_only=True)
        p = [c.momentum for c in traj.crossings]
        assert all(b <= a for a, b in zip(p, p[1:]))
        assert p[-1] < p[0]


def test_ranged_out(geom, toroid):
    traj = propagate_truth(geom, toroid, TruthMuon(1, 3.0, 0.0, 0.0), True, 0, mean_only=True)
    assert traj.ranged_out and not traj.chamber_crossings()


# --- digitisation -------------------------------------------------------------------

def _straight_truth(geom, mu, tube_id):
    """Distance and along-wire coordinate of a straight track from the origin to a wire."""
    c, d = tube_line(geom, tube_id)
    t = np.array([math.cos(mu.phi) * math.sin(mu.theta), math.sin(mu.phi) * math.sin(mu.theta),
                  math.cos(mu.theta)])
    n = np.cross(t, d)
    dist = abs(float(c @ n)) / np.linalg.norm(n)
    # closest point on the wire: minimise |c + v d - s t|
    A = np.array([[1.0, -(d @ t)], [d @ t, -1.0]])
    v, _ = np.linalg.solve(A, [-(c @ d), -(c @ t)])
    return dist, v


def _straight_event(cfg, mu, seed=0):
    geom = without_material(default_geometry())
    traj = propagate_truth(geom, NoField(), mu, material_on=False)
    return geom, digitize([traj], geom, default_rt(), cfg, seed, NoField())


def test_perfect_config_exact_times():
    mu = TruthMuon(1, 50.0, 0.3, 0.45)
    geom, ev = _straight_event(ALL_OFF, mu)
    assert len(ev.drift_hits) >= 18
    rt = default_rt()
    for h in ev.drift_hits:
        dist, _ = _straight_truth(geom, mu, h.tube_id)
        assert h.raw_time == pytest.approx(rt_time(rt, dist), abs=1e-9)


def test_noise_off_digitize_correct_recovers_radius():
    mu = TruthMuon(-1, 30.0, -0.2, 2.0)
    cfg = DigitizationConfig.noiseless()
    geom, ev = _straight_event(cfg, mu)
    rt = default_rt()
    for h in ev.drift_hits:
        dist, v = _straight_truth(geom, mu, h.tube_id)
        t, clamped = correct_drift_time(h, v, cfg, NoField(), geom)
        assert not clamped
        assert abs(rt_radius(rt, t)[0] - dist) <= 1e-9


def test_zero_efficiency_keeps_trigger():
    cfg = DigitizationConfig.noiseless(tube_efficiency=0.0)
    _, ev = _straight_event(cfg, TruthMuon(1, 50.0, 0.3, 0.45))
    assert not ev.drift_hits and len(ev.trigger_hits) == 3


def test_smearing_rms():
    cfg = DigitizationConfig.noiseless(smear=True, time_of_flight=False,
                                       signal_propagation=False, lorentz_coefficient=0.0)
    geom = without_material(default_geometry())
    rt = default_rt()
    rng = np.random.default_rng(5)
    res = []
    k = 0
    while len(res) < 10_000:
        mu = TruthMuon(1, 50.0, rng.uniform(-0.7, 0.7), rng.uniform(-math.pi, math.pi))
        traj = propagate_truth(geom, NoField(), mu, material_on=False)
        ev = digitize([traj], geom, rt, cfg, k, NoField())
        k += 1
        for h in ev.drift_hits:
            dist, _ = _straight_truth(geom, mu, h.tube_id)
            # keep away from the clipping at 0 and at the tube wall
            if 0.5e-3 < dist < 14.0e-3:
                res.append(rt_radius(rt, h.raw_time)[0] - dist)
    rms = float(np.sqrt(np.mean(np.square(res))))
    assert abs(rms - 80e-6) <= 2e-6


def test_correct_drift_time_shifts():
    geom = default_geometry()
    cfg = DigitizationConfig()
    tid = geom.chamber(20).tube_id(2, 100)
    hit = DriftHit(tid, 500.0)
    t0, _ = correct_drift_time(hit, 0.0, cfg, NoField(), geom)
    t1, _ = correct_drift_time(hit, 1.0, cfg, NoField(), geom)
    c, d = tube_line(geom, tid)
    tof = (np.linalg.norm(c + d) - np.linalg.norm(c)) / 0.299792458
    assert t1 - t0 == pytest.approx(1.0 / cfg.wire_propagation_speed - tof, abs=1e-9)
    # zero field: no Lorentz term
    no_lorentz = DigitizationConfig(lorentz_coefficient=0.0)
    assert correct_drift_time(hit, 0.3, no_lorentz, NoField(), geom) == \
        correct_drift_time(hit, 0.3, cfg, NoField(), geom)


def test_negative_corrected_time_clamped(geom):
    hit = DriftHit(geom.chamber(0).tube_id(0, 10), 0.0)
    assert correct_drift_time(hit, 0.0, DigitizationConfig(), NoField(), geom) == (0.0, True)


def test_determinism_and_serialisation(geom, toroid, rt):
    spec = GenerationSpec(muons_per_event=2)
    a, _ = simulate_event(geom, toroid, rt, DigitizationConfig(), spec, 42)
    b, _ = simulate_event(geom, toroid, rt, DigitizationConfig(), spec, 42)
    assert a.to_dict() == b.to_dict()
    again = Event.from_dict(a.to_dict())
    assert again.to_dict() == a.to_dict()


def test_background_and_delta_flags(geom, toroid, rt):
    cfg = DigitizationConfig(delta_ray_prob=0.5, background_hits_per_event=30)
    ev, trajs = simulate_event(geom, toroid, rt, cfg, GenerationSpec(), 7)
    bkg = [h for h in ev.drift_hits if h.is_background]
    delta = [h for h in ev.drift_hits if h.is_delta_ray]
    assert bkg and delta
    assert all(h.muon_index == -1 for h in bkg)
    genuine = {h.tube_id for h in ev.drift_hits if h.is_genuine}
    assert all(h.tube_id in genuine for h in delta)
    assert all(decode_tube_id(h.tube_id)[0] in {c.id for c in geom.chambers} for h in bkg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63))
def test_invalid_config_values(seed):
    with pytest.raises(ValueError):
        DigitizationConfig(tube_efficiency=1.5, seed=seed)

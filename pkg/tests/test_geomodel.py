import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muonpath.geomodel import (AlignmentCorrection, GeometryError, StationLayer, default_geometry,
                               geometry_from_dict, geometry_to_dict, load_geometry,
                               save_geometry, chambers_in_roa, tube_line)
from muonpath.segments import Roa


def test_bundled_default_counts(geom):
    g = load_geometry("default")
    assert len(g.stations) == 3
    assert all(len(s.chambers) == 16 for s in g.stations)
    assert [s.layer for s in g.stations] == [StationLayer.INNER, StationLayer.MIDDLE,
                                             StationLayer.OUTER]
    assert g == geom


def test_roundtrip(tmp_path, geom):
    path = tmp_path / "g.json"
    save_geometry(geom, path)
    again = load_geometry(path)
    assert again == geom
    assert geometry_to_dict(again) == geometry_to_dict(geom)


def test_layers_per_multilayer_five_rejected(geom):
    data = geometry_to_dict(geom)
    data["stations"][1]["chambers"][3]["layers_per_multilayer"] = 5
    with pytest.raises(GeometryError, match="layers_per_multilayer"):
        geometry_from_dict(data)


def test_empty_stations_rejected(geom, tmp_path):
    data = geometry_to_dict(geom)
    data["stations"] = []
    path = tmp_path / "g.json"
    path.write_text(json.dumps(data))
    with pytest.raises(GeometryError, match="no stations"):
        load_geometry(path)


def test_parse_failure(tmp_path):
    path = tmp_path / "g.json"
    path.write_text("{not json")
    with pytest.raises(GeometryError, match="parse"):
        load_geometry(path)


def test_alignment_bounds():
    with pytest.raises(GeometryError):
        AlignmentCorrection(translation=(6e-3, 0, 0))
    with pytest.raises(GeometryError):
        AlignmentCorrection(rotation=(0, 0, 6e-3))


def test_radii_increasing(geom):
    radii = [s.radius for s in geom.stations]
    assert radii == sorted(radii)
    assert geom.envelope.half_length == 22.0 and geom.envelope.radius == 11.0


def _with_alignment(geom, cid, align):
    stations = []
    for s in geom.stations:
        chs = tuple(replace(c, alignment=align) if c.id == cid else c for c in s.chambers)
        stations.append(replace(s, chambers=chs))
    return replace(geom, stations=tuple(stations))


def test_zero_alignment_aligned_equals_nominal(geom):
    for ch in geom.chambers:
        if not ch.alignment.is_identity:
            continue
        for layer in (0, ch.n_layers - 1):
            for idx in (0, ch.tubes_per_layer // 2, ch.tubes_per_layer - 1):
                tid = ch.tube_id(layer, idx)
                p0, d0 = tube_line(geom, tid, aligned=False)
                p1, d1 = tube_line(geom, tid, aligned=True)
                assert np.array_equal(p0, p1) and np.array_equal(d0, d1)


def test_translation_1mm(geom):
    g = _with_alignment(geom, 5, AlignmentCorrection(translation=(1e-3, 0.0, 0.0)))
    tid = g.chamber(5).tube_id(2, 40)
    p0, d0 = tube_line(g, tid, aligned=False)
    p1, d1 = tube_line(g, tid, aligned=True)
    np.testing.assert_allclose(p1, p0 + [1e-3, 0, 0], atol=1e-15)
    np.testing.assert_allclose(d1, d0, atol=1e-15)


def test_rotation_1mrad_against_explicit_matrix(geom):
    a = 1e-3
    g = _with_alignment(geom, 3, AlignmentCorrection(rotation=(0.0, 0.0, a)))
    ch = g.chamber(3)
    tid = ch.tube_id(1, 17)
    p0, d0 = tube_line(g, tid, aligned=False)
    p1, d1 = tube_line(g, tid, aligned=True)
    rz = np.array([[math.cos(a), -math.sin(a), 0.0],
                   [math.sin(a), math.cos(a), 0.0],
                   [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(d1, rz @ d0, atol=1e-14)
    np.testing.assert_allclose(p1, ch.position + rz @ (p0 - ch.position), atol=1e-13)
    assert math.acos(min(1.0, float(d0 @ d1))) == pytest.approx(a, rel=1e-6)


def test_unknown_tube(geom):
    with pytest.raises(KeyError):
        tube_line(geom, 99 * 80000)
    with pytest.raises(KeyError):
        tube_line(geom, geom.chamber(0).tube_id(0, 10**4 - 1))


def test_roa_full_acceptance(geom):
    assert chambers_in_roa(geom, Roa(0.0, 0.0, 10.0, 4.0)) == sorted(c.id for c in geom.chambers)


def test_roa_zero_width_at_chamber_centre(geom):
    ch = geom.chamber(20)
    phi = math.atan2(ch.position[1], ch.position[0])
    ids = chambers_in_roa(geom, Roa(0.0, phi, 0.0, 0.0))
    assert ids == [ch.sector, 16 + ch.sector, 32 + ch.sector]


def _brute_overlap(geom, roa):
    out = []
    for ch in geom.chambers:
        lo, hi, pc, dp = ch.footprint()
        eta_ok = max(lo, roa.eta_center - roa.half_width_eta) <= min(
            hi, roa.eta_center + roa.half_width_eta)
        d = (roa.phi_center - pc + math.pi) % (2 * math.pi) - math.pi
        if eta_ok and abs(d) <= dp + roa.half_width_phi:
            out.append(ch.id)
    return out


roas = st.builds(Roa, st.floats(-1.5, 1.5), st.floats(-math.pi, math.pi),
                 st.floats(0.0, 0.5), st.floats(0.0, 0.5))


@settings(max_examples=100, deadline=None)
@given(roas)
def test_roa_matches_brute_force(roa):
    geom = default_geometry()
    assert chambers_in_roa(geom, roa) == _brute_overlap(geom, roa)


@settings(max_examples=60, deadline=None)
@given(roas, st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_roa_monotone(roa, de, dp):
    geom = default_geometry()
    bigger = Roa(roa.eta_center, roa.phi_center, roa.half_width_eta + de, roa.half_width_phi + dp)
    assert set(chambers_in_roa(geom, roa)) <= set(chambers_in_roa(geom, bigger))

"""Toy barrel muon spectrometer geometry.

Three cylindrical stations (inner, middle, outer) of flat drift-tube
chambers arranged in azimuthal sectors, one trigger plane per chamber,
barrel material slabs and a calorimeter shell.  Everything is immutable
after construction; all lengths in metres and angles in radians.

Local chamber frame: ``u`` points outward (normal to the chamber plane),
``v`` runs along the wires (azimuthal direction), ``w`` is the precision
coordinate (global z for an unrotated barrel chamber).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA = "muonpath-geom/1"
MAX_ALIGN_TRANSLATION = 5e-3
MAX_ALIGN_ROTATION = 5e-3
_TUBE_STRIDE = 10000


class GeometryError(ValueError):
    """Raised for malformed geometry input or violated invariants."""


class StationLayer(enum.IntEnum):
    INNER = 0
    MIDDLE = 1
    OUTER = 2

    @classmethod
    def parse(cls, name: str) -> "StationLayer":
        try:
            return cls[name.upper()]
        except KeyError:
            raise GeometryError(f"station layer: unknown value {name!r}") from None


def rotation_from_vector(rotvec) -> np.ndarray:
    """Rotation matrix for a rotation vector (axis times angle), Rodrigues form."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    if angle == 0.0:
        return np.eye(3)
    k = rotvec / angle
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def eta_phi(point) -> tuple[float, float]:
    x, y, z = point
    rho = math.hypot(x, y)
    return math.asinh(z / rho), math.atan2(y, x)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class AlignmentCorrection:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if float(np.linalg.norm(self.translation)) > MAX_ALIGN_TRANSLATION:
            raise GeometryError("alignment.translation: exceeds 5 mm")
        if float(np.linalg.norm(self.rotation)) > MAX_ALIGN_ROTATION:
            raise GeometryError("alignment.rotation: exceeds 5 mrad")

    @property
    def is_identity(self) -> bool:
        return not any(self.translation) and not any(self.rotation)


@dataclass(frozen=True, eq=False)
class Chamber:
    """One drift-tube chamber: two multilayers of 3 or 4 staggered tube layers."""

    id: int
    layer: StationLayer
    sector: int
    position: np.ndarray
    rotation: np.ndarray
    layers_per_multilayer: int
    tube_pitch: float
    tube_inner_radius: float
    tube_length: float
    half_extent_w: float
    multilayer_spacing: float
    alignment: AlignmentCorrection = field(default_factory=AlignmentCorrection)
    multilayers: int = 2

    def __post_init__(self):
        if self.multilayers != 2:
            raise GeometryError(f"chamber {self.id}: multilayers must be 2")
        if self.layers_per_multilayer not in (3, 4):
            raise GeometryError(
                f"chamber {self.id}: layers_per_multilayer must be 3 or 4, "
                f"got {self.layers_per_multilayer}")
        if not self.tube_inner_radius < self.tube_pitch / 2:
            raise GeometryError(f"chamber {self.id}: tube_inner_radius must be below pitch/2")
        rot = np.asarray(self.rotation, dtype=float)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise GeometryError(f"chamber {self.id}: orientation is not orthonormal")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "rotation", rot)
        aligned_rot = rotation_from_vector(self.alignment.rotation) @ rot
        object.__setattr__(self, "_aligned", (
            self.position + np.asarray(self.alignment.translation, dtype=float), aligned_rot))

    def __eq__(self, other):
        if not isinstance(other, Chamber):
            return NotImplemented
        return chamber_to_dict(self) == chamber_to_dict(other)

    __hash__ = object.__hash__

    @property
    def n_layers(self) -> int:
        return 2 * self.layers_per_multilayer

    @property
    def layer_spacing(self) -> float:
        return self.tube_pitch * math.sqrt(3.0) / 2.0

    @property
    def tubes_per_layer(self) -> int:
        return int((2.0 * self.half_extent_w - 0.5 * self.tube_pitch) // self.tube_pitch)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.position[:2]))

    def frame(self, aligned: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(centre, rotation) where rotation columns are the local u, v, w axes."""
        if aligned:
            return self._aligned
        return self.position, self.rotation

    def layer_u(self, layer: int) -> float:
        """Local u of a tube layer; layers 0..n-1 ordered outward."""
        n = self.layers_per_multilayer
        h = self.layer_spacing
        if layer < n:
            return -0.5 * self.multilayer_spacing - (n - 1 - layer) * h
        return 0.5 * self.multilayer_spacing + (layer - n) * h

    def tube_w(self, layer: int, index: int) -> float:
        stagger = 0.5 if layer % 2 else 0.0
        return -self.half_extent_w + (index + 0.5 + stagger) * self.tube_pitch

    def nearest_tube(self, layer: int, w: float) -> int:
        stagger = 0.5 if layer % 2 else 0.0
        return int(round((w + self.half_extent_w) / self.tube_pitch - 0.5 - stagger))

    def tube_id(self, layer: int, index: int) -> int:
        return (self.id * 8 + layer) * _TUBE_STRIDE + index

    def to_global(self, local, aligned: bool = True) -> np.ndarray:
        centre, rot = self.frame(aligned)
        return centre + rot @ np.asarray(local, dtype=float)

    def to_local(self, point, aligned: bool = True) -> np.ndarray:
        centre, rot = self.frame(aligned)
        return rot.T @ (np.asarray(point, dtype=float) - centre)

    def footprint(self) -> tuple[float, float, float, float]:
        """(eta_min, eta_max, phi_centre, phi_half_width) from nominal corner projections."""
        half_v = 0.5 * self.tube_length
        corners = [self.to_global((0.0, sv * half_v, sw * self.half_extent_w), aligned=False)
                   for sv in (-1, 1) for sw in (-1, 1)]
        etas, phis = zip(*(eta_phi(c) for c in corners))
        phi_c = math.atan2(self.position[1], self.position[0])
        dphi = max(abs(wrap_angle(p - phi_c)) for p in phis)
        return min(etas), max(etas), phi_c, dphi


def decode_tube_id(tube_id: int) -> tuple[int, int, int]:
    """tube_id -> (chamber id, layer 0..7, tube index)."""
    head, index = divmod(int(tube_id), _TUBE_STRIDE)
    chamber_id, layer = divmod(head, 8)
    return chamber_id, layer, index


@dataclass(frozen=True)
class Station:
    layer: StationLayer
    chambers: tuple[Chamber, ...]

    @property
    def radius(self) -> float:
        return float(np.mean([c.radius for c in self.chambers]))


@dataclass(frozen=True)
class TriggerPlane:
    """RPC-like plane rigidly attached to a chamber, offset along its u axis."""

    id: int
    chamber_id: int
    station_layer: StationLayer
    u_offset: float
    eta_strip_pitch: float
    phi_strip_pitch: float
    half_extent_v: float
    half_extent_w: float

    def __post_init__(self):
        if self.eta_strip_pitch <= 0 or self.phi_strip_pitch <= 0:
            raise GeometryError(f"trigger plane {self.id}: strip pitches must be > 0")

    @property
    def n_eta_strips(self) -> int:
        return int(math.ceil(2.0 * self.half_extent_w / self.eta_strip_pitch))

    @property
    def n_phi_strips(self) -> int:
        return int(math.ceil(2.0 * self.half_extent_v / self.phi_strip_pitch))

    def eta_strip_w(self, index: int) -> float:
        return -self.half_extent_w + (index + 0.5) * self.eta_strip_pitch

    def phi_strip_v(self, index: int) -> float:
        return -self.half_extent_v + (index + 0.5) * self.phi_strip_pitch

    def strips_at(self, v: float, w: float) -> tuple[int, int] | None:
        if abs(v) > self.half_extent_v or abs(w) > self.half_extent_w:
            return None
        ie = min(int((w + self.half_extent_w) // self.eta_strip_pitch), self.n_eta_strips - 1)
        ip = min(int((v + self.half_extent_v) // self.phi_strip_pitch), self.n_phi_strips - 1)
        return ie, ip


@dataclass(frozen=True)
class MaterialSlab:
    """Thin barrel cylinder of material.

    Mean energy loss for a crossing at momentum p is ``eloss_a + eloss_b * p``
    (GeV), with Gaussian straggling of relative width ``eloss_sigma_frac``.
    """

    name: str
    radius: float
    half_length: float
    thickness_X0: float
    eloss_a: float = 0.0
    eloss_b: float = 0.0
    eloss_sigma_frac: float = 0.0

    def __post_init__(self):
        if self.thickness_X0 < 0:
            raise GeometryError(f"material slab {self.name}: thickness_X0 must be >= 0")
        if self.eloss_a < 0 or self.eloss_b < 0 or self.eloss_sigma_frac < 0:
            raise GeometryError(f"material slab {self.name}: eloss coefficients must be >= 0")
        if self.radius <= 0:
            raise GeometryError(f"material slab {self.name}: radius must be > 0")


@dataclass(frozen=True)
class Envelope:
    half_length: float = 22.0
    radius: float = 11.0


@dataclass(frozen=True)
class ToyGeometry:
    stations: tuple[Station, ...]
    trigger_planes: tuple[TriggerPlane, ...]
    material_slabs: tuple[MaterialSlab, ...]
    calorimeter: MaterialSlab
    envelope: Envelope = Envelope()
    spectrometer_entrance: float = 4.25
    calorimeter_entrance: float = 1.5
    eta_acceptance: float = 1.0

    def __post_init__(self):
        if not self.stations:
            raise GeometryError("stations: no stations")
        radii = [s.radius for s in self.stations]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise GeometryError("stations: radii must be strictly increasing inner -> outer")
        layers = [s.layer for s in self.stations]
        if len(set(layers)) != len(layers) or layers != sorted(layers):
            raise GeometryError("stations: each layer at most once, ordered inner -> outer")
        chambers = {}
        for st in self.stations:
            for ch in st.chambers:
                if ch.id in chambers:
                    raise GeometryError(f"chambers: duplicate id {ch.id}")
                if ch.layer != st.layer:
                    raise GeometryError(f"chamber {ch.id}: layer differs from its station")
                chambers[ch.id] = ch
        planes = {}
        for p in self.trigger_planes:
            if p.chamber_id not in chambers:
                raise GeometryError(f"trigger plane {p.id}: unknown chamber {p.chamber_id}")
            planes[p.id] = p
        if not (self.calorimeter_entrance < self.calorimeter.radius < self.spectrometer_entrance
                < radii[0]):
            raise GeometryError("calorimeter: must sit between its entrance and the spectrometer")
        object.__setattr__(self, "_chambers", chambers)
        object.__setattr__(self, "_planes", planes)
        object.__setattr__(self, "_plane_of_chamber",
                           {p.chamber_id: p for p in self.trigger_planes})

    def chamber(self, chamber_id: int) -> Chamber:
        try:
            return self._chambers[chamber_id]
        except KeyError:
            raise KeyError(f"unknown chamber id {chamber_id}") from None

    def trigger_plane(self, plane_id: int) -> TriggerPlane:
        return self._planes[plane_id]

    def plane_for_chamber(self, chamber_id: int) -> TriggerPlane | None:
        return self._plane_of_chamber.get(chamber_id)

    @property
    def chambers(self) -> list[Chamber]:
        return [self._chambers[k] for k in sorted(self._chambers)]

    def station(self, layer: StationLayer) -> Station | None:
        for st in self.stations:
            if st.layer == layer:
                return st
        return None

    def chamber_at(self, layer: StationLayer, phi: float) -> Chamber | None:
        """Chamber of the given station whose sector contains azimuth phi."""
        st = self.station(layer)
        if st is None:
            return None
        return min(st.chambers,
                   key=lambda c: abs(wrap_angle(phi - math.atan2(c.position[1], c.position[0]))))


def tube_line(geom: ToyGeometry, tube_id: int, aligned: bool = True):
    """Wire centre point and unit direction of a tube, nominal or aligned."""
    chamber_id, layer, index = decode_tube_id(tube_id)
    try:
        ch = geom.chamber(chamber_id)
    except KeyError:
        raise KeyError(f"unknown tube id {tube_id}") from None
    if layer >= ch.n_layers or not 0 <= index < ch.tubes_per_layer:
        raise KeyError(f"unknown tube id {tube_id}")
    _, rot = ch.frame(aligned)
    point = ch.to_global((ch.layer_u(layer), 0.0, ch.tube_w(layer, index)), aligned)
    return point, rot[:, 1].copy()


def chambers_in_roa(geom: ToyGeometry, roa) -> list[int]:
    """Ids of chambers whose (eta, phi) footprint overlaps the window of ``roa``."""
    out = []
    for ch in geom.chambers:
        eta_lo, eta_hi, phi_c, dphi = ch.footprint()
        if roa.eta_center + roa.half_width_eta < eta_lo or roa.eta_center - roa.half_width_eta > eta_hi:
            continue
        if abs(wrap_angle(roa.phi_center - phi_c)) > dphi + roa.half_width_phi:
            continue
        out.append(ch.id)
    return out


# --- construction of the bundled default detector -------------------------

def default_geometry(n_sectors: int = 16, scale: float = 1.0) -> ToyGeometry:
    """Programmatic form of the bundled ``geometry_default.json``."""
    station_radii = {StationLayer.INNER: 4.5, StationLayer.MIDDLE: 7.0, StationLayer.OUTER: 9.5}
    layers_per_ml = {StationLayer.INNER: 4, StationLayer.MIDDLE: 3, StationLayer.OUTER: 3}
    pitch = 0.03
    strip_pitch = 1e-2 * math.sqrt(12.0)
    stations, planes = [], []
    for layer, radius in station_radii.items():
        radius *= scale
        chambers = []
        half_w = radius * math.sinh(1.05)
        width = 2.0 * radius * math.tan(math.pi / n_sectors)
        for k in range(n_sectors):
            phi = 2.0 * math.pi * k / n_sectors
            u = (math.cos(phi), math.sin(phi), 0.0)
            v = (-math.sin(phi), math.cos(phi), 0.0)
            rot = np.column_stack([u, v, (0.0, 0.0, 1.0)])
            cid = int(layer) * n_sectors + k
            # a few chambers carry survey corrections so the aligned path is exercised
            if k % 5 == 2:
                align = AlignmentCorrection(
                    translation=(0.4e-3 * (k % 3 - 1), 0.3e-3, -0.6e-3 + 0.1e-3 * int(layer)),
                    rotation=(0.0, 0.2e-3, -0.1e-3 * (k % 2)))
            else:
                align = AlignmentCorrection()
            chambers.append(Chamber(
                id=cid, layer=layer, sector=k,
                position=np.array([radius * u[0], radius * u[1], 0.0]), rotation=rot,
                layers_per_multilayer=layers_per_ml[layer], tube_pitch=pitch,
                tube_inner_radius=0.0146, tube_length=width, half_extent_w=half_w,
                multilayer_spacing=0.06, alignment=align))
            planes.append(TriggerPlane(
                id=cid, chamber_id=cid, station_layer=layer, u_offset=0.2,
                eta_strip_pitch=strip_pitch, phi_strip_pitch=strip_pitch,
                half_extent_v=(radius + 0.2) * math.tan(math.pi / n_sectors),
                half_extent_w=half_w))
        stations.append(Station(layer=layer, chambers=tuple(chambers)))
    slabs = (
        MaterialSlab("coil_inner", 6.0 * scale, 12.0 * scale, 0.03, 0.02, 0.0, 0.1),
        MaterialSlab("coil_outer", 8.25 * scale, 12.0 * scale, 0.03, 0.02, 0.0, 0.1),
    )
    calo = MaterialSlab("calorimeter", 2.75 * scale, 6.0 * scale, 80.0, 2.0, 0.008, 0.1)
    return ToyGeometry(
        stations=tuple(stations), trigger_planes=tuple(planes), material_slabs=slabs,
        calorimeter=calo, envelope=Envelope(22.0 * scale, 11.0 * scale),
        spectrometer_entrance=4.25 * scale, calorimeter_entrance=1.5 * scale)


def without_material(geom: ToyGeometry) -> ToyGeometry:
    """Copy of ``geom`` whose slabs neither scatter nor absorb."""
    def empty(s: MaterialSlab) -> MaterialSlab:
        return replace(s, thickness_X0=0.0, eloss_a=0.0, eloss_b=0.0, eloss_sigma_frac=0.0)
    return replace(geom, material_slabs=tuple(empty(s) for s in geom.material_slabs),
                   calorimeter=empty(geom.calorimeter))


def with_strip_pitch(geom: ToyGeometry, pitch: float) -> ToyGeometry:
    """Copy of ``geom`` with every trigger strip pitch set to ``pitch``."""
    planes = tuple(replace(p, eta_strip_pitch=pitch, phi_strip_pitch=pitch)
                   for p in geom.trigger_planes)
    return replace(geom, trigger_planes=planes)


# --- serialization ----------------------------------------------------------

def chamber_to_dict(ch: Chamber) -> dict:
    return {
        "id": ch.id, "sector": ch.sector,
        "position": [float(x) for x in ch.position],
        "rotation": [[float(x) for x in row] for row in ch.rotation],
        "multilayers": ch.multilayers,
        "layers_per_multilayer": ch.layers_per_multilayer,
        "tube_pitch": ch.tube_pitch, "tube_inner_radius": ch.tube_inner_radius,
        "tube_length": ch.tube_length, "half_extent_w": ch.half_extent_w,
        "multilayer_spacing": ch.multilayer_spacing,
        "alignment": {"translation": list(ch.alignment.translation),
                      "rotation": list(ch.alignment.rotation)},
    }


def _slab_to_dict(s: MaterialSlab) -> dict:
    return {"name": s.name, "radius": s.radius, "half_length": s.half_length,
            "thickness_X0": s.thickness_X0, "eloss_a": s.eloss_a, "eloss_b": s.eloss_b,
            "eloss_sigma_frac": s.eloss_sigma_frac}


def geometry_to_dict(geom: ToyGeometry) -> dict:
    return {
        "schema": SCHEMA,
        "envelope": {"half_length": geom.envelope.half_length, "radius": geom.envelope.radius},
        "spectrometer_entrance": geom.spectrometer_entrance,
        "calorimeter_entrance": geom.calorimeter_entrance,
        "eta_acceptance": geom.eta_acceptance,
        "stations": [{"layer": st.layer.name.lower(),
                      "chambers": [chamber_to_dict(c) for c in st.chambers]}
                     for st in geom.stations],
        "trigger_planes": [{
            "id": p.id, "chamber_id": p.chamber_id, "station_layer": p.station_layer.name.lower(),
            "u_offset": p.u_offset, "eta_strip_pitch": p.eta_strip_pitch,
            "phi_strip_pitch": p.phi_strip_pitch, "half_extent_v": p.half_extent_v,
            "half_extent_w": p.half_extent_w} for p in geom.trigger_planes],
        "material_slabs": [_slab_to_dict(s) for s in geom.material_slabs],
        "calorimeter": _slab_to_dict(geom.calorimeter),
    }


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise GeometryError(f"{where}: missing field {key!r}")
    return d[key]


def geometry_from_dict(data: dict) -> ToyGeometry:
    if data.get("schema") != SCHEMA:
        raise GeometryError(f"schema: expected {SCHEMA!r}, got {data.get('schema')!r}")
    raw_stations = _require(data, "stations", "geometry")
    if not raw_stations:
        raise GeometryError("stations: no stations")
    stations = []
    for st in raw_stations:
        layer = StationLayer.parse(_require(st, "layer", "station"))
        chambers = []
        for c in _require(st, "chambers", f"station {layer.name}"):
            where = f"chamber {c.get('id')}"
            al = c.get("alignment", {})
            chambers.append(Chamber(
                id=int(_require(c, "id", where)), layer=layer, sector=int(c.get("sector", 0)),
                position=np.array(_require(c, "position", where), dtype=float),
                rotation=np.array(_require(c, "rotation", where), dtype=float),
                multilayers=int(c.get("multilayers", 2)),
                layers_per_multilayer=int(_require(c, "layers_per_multilayer", where)),
                tube_pitch=float(_require(c, "tube_pitch", where)),
                tube_inner_radius=float(_require(c, "tube_inner_radius", where)),
                tube_length=float(_require(c, "tube_length", where)),
                half_extent_w=float(_require(c, "half_extent_w", where)),
                multilayer_spacing=float(_require(c, "multilayer_spacing", where)),
                alignment=AlignmentCorrection(tuple(al.get("translation", (0.0, 0.0, 0.0))),
                                              tuple(al.get("rotation", (0.0, 0.0, 0.0))))))
        stations.append(Station(layer=layer, chambers=tuple(chambers)))
    planes = tuple(TriggerPlane(
        id=int(p["id"]), chamber_id=int(p["chamber_id"]),
        station_layer=StationLayer.parse(p["station_layer"]), u_offset=float(p["u_offset"]),
        eta_strip_pitch=float(p["eta_strip_pitch"]), phi_strip_pitch=float(p["phi_strip_pitch"]),
        half_extent_v=float(p["half_extent_v"]), half_extent_w=float(p["half_extent_w"]))
        for p in data.get("trigger_planes", []))
    slabs = tuple(MaterialSlab(**s) for s in data.get("material_slabs", []))
    env = data.get("envelope", {})
    return ToyGeometry(
        stations=tuple(stations), trigger_planes=planes, material_slabs=slabs,
        calorimeter=MaterialSlab(**_require(data, "calorimeter", "geometry")),
        envelope=Envelope(float(env.get("half_length", 22.0)), float(env.get("radius", 11.0))),
        spectrometer_entrance=float(data.get("spectrometer_entrance", 4.25)),
        calorimeter_entrance=float(data.get("calorimeter_entrance", 1.5)),
        eta_acceptance=float(data.get("eta_acceptance", 1.0)))


def load_geometry(path) -> ToyGeometry:
    """Read and validate a geometry JSON file.  ``"default"`` loads the bundled detector."""
    if str(path) == "default":
        text = resources.files("muonpath.data").joinpath("geometry_default.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeometryError(f"parse failure: {exc}") from exc
    return geometry_from_dict(data)


def save_geometry(geom: ToyGeometry, path) -> None:
    Path(path).write_text(json.dumps(geometry_to_dict(geom), indent=1) + "\n", encoding="utf-8")

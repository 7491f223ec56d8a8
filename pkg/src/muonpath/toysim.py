"""Truth generation, propagation through matter and drift-tube digitisation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from muonpath import _kernels
from muonpath.bfield import field_kernel
from muonpath.geomodel import StationLayer, ToyGeometry, decode_tube_id, tube_line
from muonpath.hitmodel import local_arc, strip_crossing
from muonpath.propagation import (P_FLOOR, PropagationError, highland, slab_path_X0,
                                  transport_global)
from muonpath.surfaces import Surface

RT_HEADER = "muonpath-rt/1"
SPEED_OF_LIGHT = 0.299792458  # m/ns
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def event_seed(campaign_seed: int, index: int) -> int:
    """Per-event seed: splitmix64 of the campaign seed advanced by the event index."""
    return splitmix64((int(campaign_seed) + int(index) * 0x9E3779B97F4A7C15) & _MASK64)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


# --- truth ------------------------------------------------------------------

@dataclass(frozen=True)
class TruthMuon:
    charge: int
    pt: float
    eta: float
    phi: float
    vertex: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.charge not in (-1, 1):
            raise ValueError("charge must be +1 or -1")
        if self.pt <= 0:
            raise ValueError("pt must be > 0")

    @property
    def theta(self) -> float:
        return 2.0 * math.atan(math.exp(-self.eta))

    @property
    def p(self) -> float:
        return self.pt * math.cosh(self.eta)

    @property
    def qop(self) -> float:
        return self.charge / self.p

    def global_state(self) -> np.ndarray:
        st, ct = math.sin(self.theta), math.cos(self.theta)
        return np.array([*self.vertex, math.cos(self.phi) * st, math.sin(self.phi) * st, ct,
                         self.qop])


@dataclass(frozen=True)
class GenerationSpec:
    """Kinematic ranges; ``pt_grid`` (if given) overrides the uniform pt range."""

    pt_range: tuple[float, float] = (10.0, 100.0)
    eta_range: tuple[float, float] = (-0.8, 0.8)
    phi_range: tuple[float, float] = (-math.pi, math.pi)
    pt_grid: tuple[float, ...] | None = None
    muons_per_event: int = 1
    charge: str = "alternate"  # alternate | random | plus | minus

    def __post_init__(self):
        lo, hi = self.pt_range
        if self.pt_grid is None and not 0 < lo <= hi <= 3000:
            raise ValueError("pt range must lie within (0, 3000] GeV")
        if self.pt_grid is not None and not all(0 < p <= 3000 for p in self.pt_grid):
            raise ValueError("pt grid values must lie within (0, 3000] GeV")
        if self.eta_range[0] > self.eta_range[1] or self.phi_range[0] > self.phi_range[1]:
            raise ValueError("empty eta/phi range")


def generate_muons(spec: GenerationSpec, n: int, seed) -> list[TruthMuon]:
    """``n`` muons uniform in the requested ranges, reproducible per seed."""
    rng = make_rng(seed)
    out = []
    for i in range(n):
        if spec.pt_grid:
            pt = float(spec.pt_grid[i % len(spec.pt_grid)])
        else:
            pt = float(rng.uniform(*spec.pt_range))
        eta = float(rng.uniform(*spec.eta_range))
        phi = float(rng.uniform(*spec.phi_range))
        if spec.charge == "alternate":
            q = 1 if i % 2 == 0 else -1
        elif spec.charge == "random":
            q = 1 if rng.random() < 0.5 else -1
        else:
            q = 1 if spec.charge == "plus" else -1
        out.append(TruthMuon(q, pt, eta, phi))
    return out


# --- RT relation -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RtRelation:
    """Piecewise-linear drift time (ns) <-> radius (m) table."""

    times: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        r = np.asarray(self.radii, dtype=float)
        if t.shape != r.shape or t.size < 2:
            raise ValueError("rt: need matching columns with >= 2 knots")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(r) <= 0):
            raise ValueError("rt: knots must be strictly increasing")
        if t[0] != 0.0 or r[0] != 0.0:
            raise ValueError("rt: table must start at (0, 0)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "radii", r)

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    @property
    def r_max(self) -> float:
        return float(self.radii[-1])


def default_rt(tube_radius: float = 0.0146, drift_velocity: float = 20e-6) -> RtRelation:
    """Linear RT: constant drift velocity (m/ns) up to the tube radius."""
    return RtRelation(np.array([0.0, tube_radius / drift_velocity]), np.array([0.0, tube_radius]))


def rt_radius(rt: RtRelation, time: float) -> tuple[float, bool]:
    """Radius (m) for a drift time; flag is True when the time was clamped."""
    clamped = not 0.0 <= time <= rt.t_max
    return float(np.interp(time, rt.times, rt.radii)), clamped


def rt_time(rt: RtRelation, radius: float) -> float:
    return float(np.interp(radius, rt.radii, rt.times))


def save_rt(rt: RtRelation, path) -> None:
    lines = [RT_HEADER] + [f"{float(t)!r} {float(r) * 1e3!r}" for t, r in zip(rt.times, rt.radii)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_rt(path) -> RtRelation:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or lines[0].strip() != RT_HEADER:
        raise ValueError(f"rt file: expected header {RT_HEADER!r}")
    data = np.array([ln.split() for ln in lines[1:]], dtype=float)
    return RtRelation(data[:, 0], data[:, 1] * 1e-3)


# --- digitisation config and hits ----------------------------------------------

@dataclass(frozen=True)
class DigitizationConfig:
    tube_resolution: float = 80e-6
    trigger_accuracy: float = 1e-2
    tube_efficiency: float = 1.0
    delta_ray_prob: float = 0.05
    background_hits_per_event: float = 20.0
    drift_velocity: float = 20e-6  # m/ns, default linear RT
    lorentz_coefficient: float = 2.0  # ns/T
    wire_propagation_speed: float = 0.2  # m/ns
    time_of_flight: bool = True
    signal_propagation: bool = True
    smear: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("tube_efficiency", "delta_ray_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tube_resolution <= 0 or self.trigger_accuracy <= 0:
            raise ValueError("resolutions must be > 0")
        if self.background_hits_per_event < 0 or self.wire_propagation_speed <= 0:
            raise ValueError("background mean must be >= 0 and wire speed > 0")

    @classmethod
    def noiseless(cls, **kw) -> "DigitizationConfig":
        base = dict(tube_efficiency=1.0, delta_ray_prob=0.0, background_hits_per_event=0.0,
                    smear=False)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DriftHit:
    tube_id: int
    raw_time: float
    is_delta_ray: bool = False
    is_background: bool = False
    muon_index: int = -1

    def __post_init__(self):
        if self.raw_time < 0:
            raise ValueError("raw_time must be >= 0")

    @property
    def is_genuine(self) -> bool:
        return not (self.is_delta_ray or self.is_background)

    @property
    def chamber_id(self) -> int:
        return decode_tube_id(self.tube_id)[0]


@dataclass(frozen=True)
class TriggerHit:
    plane_id: int
    eta_strip: int | None
    phi_strip: int | None
    muon_index: int = -1


@dataclass
class Event:
    event_id: int
    rng_seed: int
    truth: list = field(default_factory=list)
    drift_hits: list = field(default_factory=list)
    trigger_hits: list = field(default_factory=list)
    inner_tracks: list = field(default_factory=list)
    campaign_id: str = ""

    def to_dict(self) -> dict:
        return {
            "campaign_id": self.campaign_id, "event_id": self.event_id, "rng_seed": self.rng_seed,
            "truth": [asdict(m) for m in self.truth],
            "drift_hits": [[h.tube_id, h.raw_time, int(h.is_delta_ray), int(h.is_background),
                            h.muon_index] for h in self.drift_hits],
            "trigger_hits": [[h.plane_id, h.eta_strip, h.phi_strip, h.muon_index]
                             for h in self.trigger_hits],
            "inner_tracks": self.inner_tracks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(
            event_id=int(d["event_id"]), rng_seed=int(d["rng_seed"]),
            truth=[TruthMuon(m["charge"], m["pt"], m["eta"], m["phi"], tuple(m["vertex"]))
                   for m in d["truth"]],
            drift_hits=[DriftHit(int(t), float(rt), bool(dr), bool(bg), int(mi))
                        for t, rt, dr, bg, mi in d["drift_hits"]],
            trigger_hits=[TriggerHit(int(p), e, f, int(mi)) for p, e, f, mi in d["trigger_hits"]],
            inner_tracks=list(d.get("inner_tracks", [])),
            campaign_id=d.get("campaign_id", ""))


# --- truth propagation ---------------------------------------------------------

@dataclass
class Crossing:
    kind: str  # calorimeter_entrance | slab | spectrometer_entrance | chamber
    name: str
    g: np.ndarray
    momentum: float
    chamber_id: int = -1
    local: np.ndarray | None = None


@dataclass
class Trajectory:
    muon: TruthMuon
    crossings: list
    ranged_out: bool = False
    lost: bool = False

    def chamber_crossings(self) -> list:
        return [c for c in self.crossings if c.kind == "chamber"]

    def at(self, kind: str) -> Crossing | None:
        for c in self.crossings:
            if c.kind == kind:
                return c
        return None


def _ordered_spectrometer_items(geom: ToyGeometry):
    items = [(st.radius, "station", st) for st in geom.stations]
    items += [(s.radius, "slab", s) for s in geom.material_slabs]
    return sorted(items, key=lambda it: it[0])


def _cross_station(geom, station, g, field):
    phi = math.atan2(g[1], g[0])
    first = geom.chamber_at(station.layer, phi)
    for ch in [first] + _neighbours(station, first):
        surf = Surface.station_plane(ch)
        try:
            g1, _, _ = transport_global(g, surf, field, direction=1, with_jac=False)
        except PropagationError:
            continue
        local, _ = surf.to_local(g1)
        if abs(local[0]) <= 0.5 * ch.tube_length and abs(local[1]) <= ch.half_extent_w:
            return ch, g1, local
    return None, None, None


def _neighbours(station, chamber):
    n = len(station.chambers)
    by_sector = {c.sector: c for c in station.chambers}
    return [by_sector[s] for s in ((chamber.sector - 1) % n, (chamber.sector + 1) % n)
            if s in by_sector and by_sector[s] is not chamber]


def _material_kick(g, slab, rng, material_on, mean_only):
    """Scatter then lose energy at a slab; returns (new g, p_in, p_out)."""
    qop = g[6]
    p_in = 1.0 / abs(qop)
    if not material_on:
        return g, p_in, p_in
    g = g.copy()
    if not mean_only and slab.thickness_X0 > 0:
        th0 = highland(p_in, slab_path_X0(slab, g))
        t = g[3:6] / np.linalg.norm(g[3:6])
        theta = math.acos(max(-1.0, min(1.0, t[2])))
        phi = math.atan2(t[1], t[0])
        a, b = rng.normal(0.0, th0, size=2)
        phi += a / math.sin(theta)
        theta += b
        g[3:6] = (math.cos(phi) * math.sin(theta), math.sin(phi) * math.sin(theta), math.cos(theta))
    de = slab.eloss_a + slab.eloss_b * p_in
    if not mean_only and slab.eloss_sigma_frac > 0:
        de = max(0.0, rng.normal(de, slab.eloss_sigma_frac * de))
    p_out = p_in - de
    g[6] = math.copysign(1.0 / p_out, qop) if p_out > 0 else math.copysign(1e9, qop)
    return g, p_in, p_out


def propagate_truth(geom: ToyGeometry, field, muon: TruthMuon, material_on: bool = True,
                    seed=0, mean_only: bool = False) -> Trajectory:
    """Outward propagation recording calorimeter, slab and chamber crossings."""
    rng = make_rng(seed)
    g = muon.global_state()
    traj = Trajectory(muon, [])

    def record(kind, name, g, **kw):
        traj.crossings.append(Crossing(kind, name, g.copy(), 1.0 / abs(g[6]), **kw))

    def to_cylinder(g, radius):
        g1, _, _ = transport_global(g, Surface.cylinder(radius), field, direction=1,
                                    with_jac=False)
        return g1

    try:
        g = to_cylinder(g, geom.calorimeter_entrance)
        record("calorimeter_entrance", "calorimeter_entrance", g)
        g = to_cylinder(g, geom.calorimeter.radius)
        g, _, p_out = _material_kick(g, geom.calorimeter, rng, material_on, mean_only)
        record("slab", geom.calorimeter.name, g)
        if p_out < P_FLOOR:
            traj.ranged_out = True
            return traj
        g = to_cylinder(g, geom.spectrometer_entrance)
        record("spectrometer_entrance", "spectrometer_entrance", g)
        for _, what, obj in _ordered_spectrometer_items(geom):
            if what == "slab":
                g = to_cylinder(g, obj.radius)
                g, _, p_out = _material_kick(g, obj, rng, material_on, mean_only)
                record("slab", obj.name, g)
                if p_out < P_FLOOR:
                    traj.ranged_out = True
                    return traj
            else:
                ch, g1, local = _cross_station(geom, obj, g, field)
                if ch is None:
                    continue
                g = g1
                record("chamber", f"chamber{ch.id}", g, chamber_id=ch.id,
                       local=np.array([local[0], local[1], local[2], local[3], local[4]]))
    except PropagationError:
        traj.lost = True
    return traj


# --- digitisation ---------------------------------------------------------------

def _b_magnitude(field, x) -> float:
    kind, params, grid = field_kernel(field)
    b, _ = _kernels.field_eval(kind, params, grid, float(x[0]), float(x[1]), float(x[2]))
    return float(np.linalg.norm(b))


def time_offsets(geom, tube_id: int, along_wire: float, cfg: DigitizationConfig, field) -> float:
    """Sum of the signal-propagation, time-of-flight and Lorentz terms (ns)."""
    chamber_id, _, _ = decode_tube_id(tube_id)
    ch = geom.chamber(chamber_id)
    centre, direction = tube_line(geom, tube_id, aligned=True)
    point = centre + along_wire * direction
    total = 0.0
    if cfg.signal_propagation:
        total += (0.5 * ch.tube_length - along_wire) / cfg.wire_propagation_speed
    if cfg.time_of_flight:
        total += float(np.linalg.norm(point)) / SPEED_OF_LIGHT
    if cfg.lorentz_coefficient:
        total += cfg.lorentz_coefficient * _b_magnitude(field, point)
    return total


def correct_drift_time(hit: DriftHit, along_wire: float, cfg: DigitizationConfig, field,
                       geom) -> tuple[float, bool]:
    """Raw time minus the three offsets for a track hypothesis crossing the
    wire at ``along_wire``.  Returns (drift time, clamped flag)."""
    t = hit.raw_time - time_offsets(geom, hit.tube_id, along_wire, cfg, field)
    if t < 0:
        return 0.0, True
    return t, False


def _chamber_tube_hits(ch, arc):
    """(tube_id, distance, along-wire) for every tube the arc passes within radius."""
    out = []
    for layer in range(ch.n_layers):
        u = ch.layer_u(layer)
        s = arc.s_at_u(u)
        w_c = float(arc.point(s)[2])
        centre = ch.nearest_tube(layer, w_c)
        idx = np.array([i for i in (centre - 1, centre, centre + 1)
                        if 0 <= i < ch.tubes_per_layer])
        if idx.size == 0:
            continue
        w = np.array([ch.tube_w(layer, int(i)) for i in idx])
        dist, _, _, v = arc.dca(np.full(idx.size, u), w)
        for i, d, vv in zip(idx, dist, v):
            if d < ch.tube_inner_radius and abs(vv) <= 0.5 * ch.tube_length:
                out.append((ch.tube_id(layer, int(i)), float(d), float(vv)))
    return out


def digitize(trajectories, geom: ToyGeometry, rt: RtRelation, cfg: DigitizationConfig, seed,
             field, event_id: int = 0) -> Event:
    """Drift and trigger hits for all trajectories of one event, plus background."""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    rng = make_rng(seed)
    drift, trig = [], []
    for mi, traj in enumerate(trajectories):
        for cr in traj.chamber_crossings():
            ch = geom.chamber(cr.chamber_id)
            arc = local_arc(ch, cr.local, field)
            for tube_id, dist, v in _chamber_tube_hits(ch, arc):
                if cfg.tube_efficiency < 1.0 and rng.random() >= cfg.tube_efficiency:
                    continue
                r = dist
                if cfg.smear:
                    r = min(max(r + rng.normal(0.0, cfg.tube_resolution), 0.0), rt.r_max)
                offset = time_offsets(geom, tube_id, v, cfg, field)
                drift.append(DriftHit(tube_id, rt_time(rt, r) + offset, muon_index=mi))
                if cfg.delta_ray_prob > 0 and rng.random() < cfg.delta_ray_prob:
                    r_delta = float(rng.uniform(0.0, dist))
                    drift.append(DriftHit(tube_id, rt_time(rt, r_delta) + offset,
                                          is_delta_ray=True, muon_index=mi))
            plane = geom.plane_for_chamber(ch.id)
            if plane is not None:
                v, w = strip_crossing(local_arc(ch, cr.local, field, 0.0), plane.u_offset)
                strips = plane.strips_at(v, w)
                if strips is not None:
                    trig.append(TriggerHit(plane.id, strips[0], strips[1], muon_index=mi))
    n_bkg = int(rng.poisson(cfg.background_hits_per_event)) if cfg.background_hits_per_event else 0
    chambers = geom.chambers
    for _ in range(n_bkg):
        ch = chambers[int(rng.integers(len(chambers)))]
        layer = int(rng.integers(ch.n_layers))
        idx = int(rng.integers(ch.tubes_per_layer))
        t = float(rng.uniform(0.0, rt.t_max + 50.0))
        drift.append(DriftHit(ch.tube_id(layer, idx), t, is_background=True))
    drift.sort(key=lambda h: (h.tube_id, h.raw_time))
    return Event(event_id=event_id, rng_seed=int(seed) if not isinstance(seed, np.random.Generator)
                 else 0, truth=[t.muon for t in trajectories], drift_hits=drift,
                 trigger_hits=trig)


def simulate_event(geom, field, rt, cfg: DigitizationConfig, spec: GenerationSpec, seed: int,
                   event_id: int = 0, material_on: bool = True, muons=None,
                   mean_only: bool = False) -> tuple[Event, list]:
    """Generate, propagate and digitise one event.  Returns (event, trajectories)."""
    rng = make_rng(seed)
    if muons is None:
        muons = generate_muons(spec, spec.muons_per_event, rng)
    trajs = [propagate_truth(geom, field, m, material_on, rng, mean_only) for m in muons]
    event = digitize(trajs, geom, rt, cfg, rng, field, event_id)
    event.rng_seed = 0 if isinstance(seed, np.random.Generator) else int(seed)
    return event, trajs


def station_layer_of(geom, chamber_id: int) -> StationLayer:
    return geom.chamber(chamber_id).layer

"""Campaign configuration: one JSON file naming every input of a run."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from muonpath.bfield import NoField, ToroidModel, UniformField, load_map
from muonpath.geomodel import GeometryError, load_geometry, with_strip_pitch
from muonpath.perigee import EnergyLossParam, InnerTrackerConfig
from muonpath.pipeline import ReconstructionConfig
from muonpath.segments import SegmentConfig
from muonpath.toysim import DigitizationConfig, GenerationSpec, default_rt, load_rt
from muonpath.trackfit import FitConfig, ScanConfig

DEFAULT_PT_BINS = (6.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0)
DEFAULT_ETA_BINS = (-1.0, -0.5, 0.0, 0.5, 1.0)

_TOP_KEYS = {"geometry", "field", "rt", "digitization", "generation", "material",
             "inner_tracker", "reconstruction", "analysis", "benchmark", "output_dir", "seed",
             "strip_pitch"}


class ConfigError(ValueError):
    """Invalid or inconsistent campaign configuration."""


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    for k, v in data.items():
        if isinstance(v, list):
            data[k] = tuple(v)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class CampaignConfig:
    raw: dict
    base_dir: Path
    n_events: int
    generation: GenerationSpec
    pt_grid: tuple | None
    digitization: DigitizationConfig
    inner_tracker: InnerTrackerConfig
    reconstruction: ReconstructionConfig
    material_on: bool = True
    mean_only: bool = False
    pt_bins: tuple = DEFAULT_PT_BINS
    eta_bins: tuple = DEFAULT_ETA_BINS
    benchmark_events: int = 100
    output_dir: Path = Path("out")
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def total_events(self) -> int:
        return self.n_events * (len(self.pt_grid) if self.pt_grid else 1)

    def pt_for_event(self, index: int):
        return self.pt_grid[index // self.n_events] if self.pt_grid else None

    @property
    def campaign_id(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def _path(self, value) -> str:
        if value == "default":
            return value
        p = Path(value)
        return str(p if p.is_absolute() else self.base_dir / p)

    def geometry(self):
        if "geometry" not in self._cache:
            geom = load_geometry(self._path(self.raw.get("geometry", "default")))
            if self.raw.get("strip_pitch") is not None:
                geom = with_strip_pitch(geom, float(self.raw["strip_pitch"]))
            self._cache["geometry"] = geom
        return self._cache["geometry"]

    def field(self):
        if "field" not in self._cache:
            spec = dict(self.raw.get("field", {"model": "toroid"}))
            if "map" in spec:
                f = load_map(self._path(spec["map"]))
            else:
                model = spec.pop("model", "toroid")
                if model == "toroid":
                    f = ToroidModel(**spec)
                elif model == "uniform":
                    f = UniformField(tuple(spec.get("b", (0.0, 0.0, 1.0))))
                else:
                    f = NoField()
            self._cache["field"] = f
        return self._cache["field"]

    def rt(self):
        if "rt" not in self._cache:
            value = self.raw.get("rt", "default")
            if value == "default":
                self._cache["rt"] = default_rt(drift_velocity=self.digitization.drift_velocity)
            else:
                self._cache["rt"] = load_rt(self._path(value))
        return self._cache["rt"]


def parse_config(raw: dict, base_dir=".", seed: int | None = None) -> CampaignConfig:
    """Validate a configuration dictionary; ``seed`` overrides the file's seed."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = copy.deepcopy(raw)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = int(seed)
    base = Path(base_dir)
    gen = dict(raw.get("generation", {}))
    n_events = gen.pop("n_events", 1)
    if not isinstance(n_events, int) or n_events < 1:
        raise ConfigError("generation.n_events must be an integer >= 1")
    pt_grid = tuple(float(p) for p in gen.get("pt_grid") or ()) or None
    spec = _build(GenerationSpec, gen, "generation")
    digi = _build(DigitizationConfig, raw.get("digitization"), "digitization")
    inner = _build(InnerTrackerConfig, raw.get("inner_tracker"), "inner_tracker")
    rec = dict(raw.get("reconstruction", {}))
    try:
        eloss = rec.pop("calorimeter_eloss", None)
        recon = ReconstructionConfig(
            segments=_build(SegmentConfig, rec.pop("segments", None), "reconstruction.segments"),
            scan=_build(ScanConfig, rec.pop("scan", None), "reconstruction.scan"),
            fit=_build(FitConfig, rec.pop("fit", None), "reconstruction.fit"),
            calorimeter_eloss=None if eloss is None else _build(EnergyLossParam, eloss,
                                                                "calorimeter_eloss"),
            **rec)
    except TypeError as exc:
        raise ConfigError(f"reconstruction: {exc}") from exc
    material = raw.get("material", {})
    ana = raw.get("analysis", {})
    pt_bins = tuple(float(x) for x in ana.get("pt_bins", DEFAULT_PT_BINS))
    eta_bins = tuple(float(x) for x in ana.get("eta_bins", DEFAULT_ETA_BINS))
    for name, b in (("pt_bins", pt_bins), ("eta_bins", eta_bins)):
        if len(b) < 2 or any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ConfigError(f"analysis.{name} must be increasing with >= 2 edges")
    bench = raw.get("benchmark", {})
    cfg = CampaignConfig(
        raw=raw, base_dir=base, n_events=n_events, generation=spec, pt_grid=pt_grid,
        digitization=digi, inner_tracker=inner, reconstruction=recon,
        material_on=bool(material.get("enabled", True)),
        mean_only=bool(material.get("mean_only", False)),
        pt_bins=pt_bins, eta_bins=eta_bins,
        benchmark_events=int(bench.get("n_events", 100)),
        output_dir=Path(raw.get("output_dir", "out")), seed=int(raw.get("seed", 0)))
    if cfg.benchmark_events < 1:
        raise ConfigError("benchmark.n_events must be >= 1")
    # resolve referenced files now so that a bad path is a config error
    for key in ("geometry", "rt"):
        value = raw.get(key, "default")
        if value != "default" and not Path(cfg._path(value)).is_file():
            raise ConfigError(f"{key}: file not found: {value}")
    fspec = raw.get("field", {})
    if "map" in fspec and not Path(cfg._path(fspec["map"])).is_file():
        raise ConfigError(f"field map not found: {fspec['map']}")
    if fspec.get("model", "toroid") not in ("toroid", "uniform", "none"):
        raise ConfigError(f"field: unknown model {fspec.get('model')!r}")
    try:
        cfg.geometry()
        cfg.field()
        cfg.rt()
    except (GeometryError, ValueError, TypeError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, seed: int | None = None) -> CampaignConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc
    return parse_config(raw, path.parent, seed)

"""Per-event reconstruction chain: ROAs, segments, matching, fits, backtracking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from muonpath.perigee import (EnergyLossParam, InnerTrackerConfig, backtrack, combine,
                              inner_track_from_dict, reject_fakes, simulate_inner_track)
from muonpath.segments import SegmentConfig, find_roas, find_segments
from muonpath.toysim import (DigitizationConfig, GenerationSpec, event_seed, generate_muons,
                             make_rng, simulate_event)
from muonpath.trackfit import (FitConfig, ScanConfig, Status, fit_candidate, global_refit,
                               match_segments, seed_candidates, select_tracks)

STAGES = ("roa", "segments", "matching", "fit", "refit", "select", "backtrack", "combine")


@dataclass(frozen=True)
class ReconstructionConfig:
    segments: SegmentConfig = SegmentConfig()
    scan: ScanConfig = ScanConfig()
    fit: FitConfig = FitConfig()
    roa_half_width: float = 0.2
    fake_cut: float = 25.0
    calorimeter_eloss: EnergyLossParam | None = None
    record_fit_time: bool = False


@dataclass
class EventResult:
    event_id: int
    tracks: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


class _Timer:
    def __init__(self):
        self.ns = {s: 0 for s in STAGES}

    def run(self, stage, fn, *args, **kw):
        t0 = time.perf_counter_ns()
        try:
            return fn(*args, **kw)
        finally:
            self.ns[stage] += time.perf_counter_ns() - t0


def _params_record(pair) -> dict | None:
    if pair is None:
        return None
    params, cov = pair
    return {"surface": params.surface.label, "params": [float(v) for v in params.vector],
            "cov": [float(v) for v in np.asarray(cov).ravel()]}


def reconstruct_event(event, geom, field, rt, cfg: ReconstructionConfig = ReconstructionConfig(),
                      digi: DigitizationConfig | None = None) -> EventResult:
    """Run the full chain on one event; returns accepted tracks as records."""
    digi = digi or DigitizationConfig()
    timer = _Timer()
    counts = {"roas": 0, "segments": 0, "candidates": 0, "matched": 0, "fitted": 0,
              "refitted": 0, "accepted": 0}
    hw = cfg.roa_half_width
    roas = timer.run("roa", find_roas, event.trigger_hits, geom, hw, hw)
    counts["roas"] = len(roas)
    refitted = []
    for roa in roas:
        segs = timer.run("segments", find_segments, event, geom, rt, roa, cfg.segments, field,
                         digi)
        counts["segments"] += len(segs)
        cands = timer.run("matching", seed_candidates, segs, field, geom)
        counts["candidates"] += len(cands)
        seen = set()
        for cand in cands:
            timer.run("matching", match_segments, cand, segs, field, geom, cfg.scan)
            if cand.status is Status.REJECTED:
                continue
            key = tuple(sorted(id(s) for s in cand.segments.values()))
            if key in seen:
                continue
            seen.add(key)
            counts["matched"] += 1
            timer.run("fit", fit_candidate, cand, field, geom, cfg.fit)
            if cand.status is not Status.FITTED:
                continue
            counts["fitted"] += 1
            timer.run("refit", global_refit, cand, event, rt, field, geom, cfg.fit, digi)
            if cand.status is Status.REFITTED:
                counts["refitted"] += 1
                refitted.append(cand)
    accepted = timer.run("select", select_tracks, refitted, cfg.fit)
    counts["accepted"] = len(accepted)
    inner = [inner_track_from_dict(d) for d in event.inner_tracks]
    records = []
    for k, cand in enumerate(accepted):
        report = timer.run("backtrack", backtrack, cand.params, cand.cov, geom, field,
                           cfg.calorimeter_eloss)
        rec = {
            "event_id": event.event_id, "track": k, "status": cand.status.value,
            "chi2": float(cand.chi2), "ndof": int(cand.ndof),
            "n_hits": len(cand.used_hits), "n_strips": cand.n_strips,
            "hits": sorted(int(h.hit_index) for h in cand.used_hits),
            "chambers": cand.chamber_ids,
            "spectrometer_entrance": _params_record(report.at_spectrometer_entrance),
            "calorimeter_entrance": _params_record(report.at_calorimeter_entrance),
            "perigee": _params_record(report.at_perigee),
            "backtrack_flag": report.reason if report.flagged else "",
            "fit_time_ns": int(cand.fit_time_ns) if cfg.record_fit_time else 0,
            "combined": None,
        }
        if report.at_perigee is not None and inner:
            t0 = time.perf_counter_ns()
            best = None
            for j, it in enumerate(inner):
                try:
                    comb = combine(report.at_perigee, it, k, j)
                except ValueError:
                    continue
                if best is None or comb.match_chi2 < best.match_chi2:
                    best = comb
            if best is not None:
                dec = reject_fakes(best, cfg.fake_cut)
                rec["combined"] = {
                    "inner_id": best.inner_id, "match_chi2": float(best.match_chi2),
                    "accepted": bool(dec.accepted),
                    "params": [float(v) for v in best.params.vector],
                    "cov": [float(v) for v in best.cov.ravel()]}
            timer.ns["combine"] += time.perf_counter_ns() - t0
        records.append(rec)
    return EventResult(event.event_id, records, counts, dict(timer.ns))


def simulate_campaign_event(index: int, seed: int, geom, field, rt, digi: DigitizationConfig,
                            spec: GenerationSpec, inner_cfg: InnerTrackerConfig | None,
                            material_on: bool = True, mean_only: bool = False, pt=None,
                            campaign_id: str = ""):
    """Event ``index`` of a campaign, reproducible from (seed, index) alone."""
    s = event_seed(seed, index)
    rng = make_rng(s)
    muons = generate_muons(spec, spec.muons_per_event, rng)
    if pt is not None:
        muons = [replace(m, pt=float(pt)) for m in muons]
    event, trajs = simulate_event(geom, field, rt, digi, spec, rng, index, material_on, muons,
                                  mean_only)
    event.event_id = index
    event.rng_seed = int(s)
    event.campaign_id = campaign_id
    if inner_cfg is not None and inner_cfg.enabled:
        event.inner_tracks = [simulate_inner_track(m, inner_cfg, rng) for m in muons]
    return event, trajs

"""``muonpath`` command line: simulate, reconstruct, analyze, benchmark."""

from __future__ import annotations

import argparse
import logging
import multiprocessing as mp
import sys
import time
from pathlib import Path

import numpy as np

from muonpath import analysis as ana
from muonpath.config import CampaignConfig, ConfigError, load_config
from muonpath.io import DataError, read_events, read_jsonl, write_csv, write_jsonl
from muonpath.pipeline import STAGES, reconstruct_event, simulate_campaign_event
from muonpath.toysim import Event

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2
EVENTS_FILE, TRACKS_FILE = "events.jsonl", "tracks.jsonl"

log = logging.getLogger("muonpath")

# per-process state for worker pools
_STATE: dict = {}


def _init_worker(config_path, seed):
    _STATE["cfg"] = load_config(config_path, seed)


def _cfg() -> CampaignConfig:
    return _STATE["cfg"]


def _simulate_one(index: int) -> dict:
    cfg = _cfg()
    event, _ = simulate_campaign_event(
        index, cfg.seed, cfg.geometry(), cfg.field(), cfg.rt(), cfg.digitization,
        cfg.generation, cfg.inner_tracker, cfg.material_on, cfg.mean_only,
        cfg.pt_for_event(index), cfg.campaign_id)
    return event.to_dict()


def _reconstruct_one(event_dict: dict):
    cfg = _cfg()
    event = Event.from_dict(event_dict)
    res = reconstruct_event(event, cfg.geometry(), cfg.field(), cfg.rt(), cfg.reconstruction,
                            cfg.digitization)
    for t in res.tracks:
        t["campaign_id"] = event.campaign_id
    return res


def _map(fn, items, args):
    """Ordered map, in-process or over a worker pool."""
    if args.workers <= 1:
        _init_worker(args.config, args.seed)
        return [fn(x) for x in items]
    with mp.get_context("spawn").Pool(args.workers, _init_worker,
                                      (args.config, args.seed)) as pool:
        return list(pool.imap(fn, items, chunksize=4))


def _out_dir(args, cfg: CampaignConfig) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = cfg.output_dir if cfg.output_dir.is_absolute() else cfg.base_dir / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args, cfg) -> int:
    out = _out_dir(args, cfg)
    records = _map(_simulate_one, range(cfg.total_events), args)
    write_jsonl(out / EVENTS_FILE, records)
    n_hits = sum(len(r["drift_hits"]) for r in records)
    n_mu = sum(len(r["truth"]) for r in records)
    print(f"simulated {len(records)} events, {n_mu} muons, {n_hits} drift hits "
          f"-> {out / EVENTS_FILE} (campaign {cfg.campaign_id})")
    return EXIT_OK


def _events_path(args, out: Path) -> Path:
    return Path(args.events) if args.events else out / EVENTS_FILE


def cmd_reconstruct(args, cfg) -> int:
    out = _out_dir(args, cfg)
    read = read_jsonl(_events_path(args, out))
    good = []
    for d in read.records:
        try:
            Event.from_dict(d)
            good.append(d)
        except (ValueError, KeyError, TypeError) as exc:
            read.skipped += 1
            log.warning("skipping corrupt event (%s)", exc)
    results = _map(_reconstruct_one, good, args)
    tracks = [t for r in results for t in r.tracks]
    write_jsonl(out / TRACKS_FILE, tracks)
    totals = {k: sum(r.counts.get(k, 0) for r in results)
              for k in ("roas", "segments", "candidates", "matched", "fitted", "refitted",
                        "accepted")}
    print(f"events: {len(good)}  skipped: {read.skipped}")
    print("stage counts: " + "  ".join(f"{k}={v}" for k, v in totals.items()))
    print(f"tracks -> {out / TRACKS_FILE}")
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    out = _out_dir(args, cfg)
    events = read_events(_events_path(args, out))
    tracks = read_jsonl(out / TRACKS_FILE)
    ids = {e.campaign_id for e in events.records} | {t.get("campaign_id", "")
                                                     for t in tracks.records}
    if len(ids) > 1:
        raise DataError(f"mismatched campaign ids: {sorted(ids)}")
    cid = ids.pop() if ids else cfg.campaign_id
    by_event: dict = {}
    for t in tracks.records:
        by_event.setdefault(t["event_id"], []).append(t)
    outcomes = ana.classify(events.records, by_event, cfg.pt_bins, cfg.eta_bins)
    for var, edges in (("pt", cfg.pt_bins), ("eta", cfg.eta_bins)):
        eff = ana.efficiency_table(outcomes, edges, var)
        write_csv(out / f"efficiency_{var}.csv", cid, ana.EFFICIENCY_HEADER,
                  [[b.lo, b.hi, b.n_truth, b.n_matched, b.efficiency, b.error] for b in eff])
        res = ana.resolution_table(outcomes, edges, var)
        write_csv(out / f"resolution_{var}.csv", cid, ana.RESOLUTION_HEADER,
                  [b.row() for b in res])
    for kind, comb in (("standalone", False), ("combined", True)):
        rows = ana.pull_rows(outcomes, comb)
        write_csv(out / f"pulls_{kind}.csv", cid, ana.PULL_HEADER, rows)
        write_csv(out / f"pulls_{kind}_summary.csv", cid, ["param", "n", "mean", "std"],
                  ana.pull_summary(rows))
    cats = {c: sum(o.category == c for o in outcomes)
            for c in (ana.MATCHED, ana.MISSED, ana.OUT_OF_ACCEPTANCE)}
    write_csv(out / "classification.csv", cid, ["category", "n"], list(cats.items()))
    print(f"truth muons: {len(outcomes)}  " + "  ".join(f"{k}={v}" for k, v in cats.items()))
    print(f"tables -> {out}")
    return EXIT_OK


def benchmark_rows(cfg: CampaignConfig, n_events: int) -> list[list]:
    """Per-event stage timings in milliseconds, one row per event."""
    geom, field, rt = cfg.geometry(), cfg.field(), cfg.rt()
    rows = []
    for i in range(n_events):
        event, _ = simulate_campaign_event(i, cfg.seed, geom, field, rt, cfg.digitization,
                                           cfg.generation, cfg.inner_tracker, cfg.material_on,
                                           cfg.mean_only, cfg.pt_for_event(i % cfg.total_events),
                                           cfg.campaign_id)
        t0 = time.perf_counter_ns()
        res = reconstruct_event(event, geom, field, rt, cfg.reconstruction, cfg.digitization)
        total = time.perf_counter_ns() - t0
        rows.append([i, *[res.timing[s] / 1e6 for s in STAGES], total / 1e6])
    return rows


TIMING_HEADER = ["event_id", *[f"{s}_ms" for s in STAGES], "total_ms"]


def cmd_benchmark(args, cfg) -> int:
    out = _out_dir(args, cfg)
    _init_worker(args.config, args.seed)
    # warm-up so that JIT compilation does not land in the first row
    benchmark_rows(cfg, 1)
    rows = benchmark_rows(cfg, cfg.benchmark_events)
    arr = np.asarray([r[1:] for r in rows], dtype=float)
    med = np.median(arr, axis=0)
    p95 = np.percentile(arr, 95, axis=0)
    write_csv(out / "timing.csv", cfg.campaign_id, TIMING_HEADER,
              rows + [["median", *[float(v) for v in med]]])
    names = [*STAGES, "total"]
    write_csv(out / "timing_summary.csv", cfg.campaign_id, ["stage", "median_ms", "p95_ms"],
              [[n, float(m), float(p)] for n, m, p in zip(names, med, p95)])
    print(f"{len(rows)} events: median {med[-1]:.1f} ms/event, p95 {p95[-1]:.1f} ms/event")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "analyze": cmd_analyze, "benchmark": cmd_benchmark}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="muonpath", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="campaign configuration (JSON)")
    p.add_argument("--events", help="event file (default: <out>/events.jsonl)")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

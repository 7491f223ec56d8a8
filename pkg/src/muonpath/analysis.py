"""Truth matching, efficiency, resolution and pull tables."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from muonpath.geomodel import wrap_angle
from muonpath.perigee import truth_perigee

PARAM_NAMES = ("d0", "z0", "phi", "theta", "qop")
MATCHED, MISSED, OUT_OF_ACCEPTANCE = "matched", "missed", "out_of_acceptance"
# sd of half the 16-84% range for Gaussian data is about 0.964 sigma / sqrt(n)
_QUANTILE_ERR = 0.964


@dataclass
class MuonOutcome:
    event_id: int
    muon: int
    pt: float
    eta: float
    category: str
    truth: np.ndarray
    track: dict | None = None
    share: float = 0.0


def track_share(track: dict, event) -> tuple[int, float]:
    """Majority truth muon among a track's hits and its fraction of them."""
    hits = track.get("hits", [])
    if not hits:
        return -1, 0.0
    owners = Counter(event.drift_hits[i].muon_index for i in hits)
    (muon, n), = sorted(owners.items(), key=lambda kv: (-kv[1], kv[0]))[:1]
    return muon, n / len(hits)


def in_acceptance(pt: float, eta: float, pt_bins, eta_bins) -> bool:
    return pt_bins[0] <= pt <= pt_bins[-1] and eta_bins[0] <= eta <= eta_bins[-1]


def classify(events, tracks_by_event: dict, pt_bins, eta_bins,
             threshold: float = 0.5) -> list[MuonOutcome]:
    """Every truth muon exactly once: matched, missed or out of acceptance."""
    out = []
    for ev in events:
        best: dict[int, tuple[float, dict]] = {}
        for trk in tracks_by_event.get(ev.event_id, []):
            muon, share = track_share(trk, ev)
            if muon < 0 or share <= threshold:
                continue
            if muon not in best or share > best[muon][0]:
                best[muon] = (share, trk)
        for k, m in enumerate(ev.truth):
            o = MuonOutcome(ev.event_id, k, m.pt, m.eta, MISSED, truth_perigee(m))
            if not in_acceptance(m.pt, m.eta, pt_bins, eta_bins):
                o.category = OUT_OF_ACCEPTANCE
            elif k in best:
                o.category = MATCHED
                o.share, o.track = best[k]
            out.append(o)
    return out


def _bin_index(x: float, edges) -> int:
    if x == edges[-1]:
        return len(edges) - 2
    i = int(np.searchsorted(edges, x, side="right")) - 1
    return i if 0 <= i < len(edges) - 1 else -1


@dataclass
class EfficiencyBin:
    lo: float
    hi: float
    n_truth: int = 0
    n_matched: int = 0

    @property
    def efficiency(self) -> float:
        return self.n_matched / self.n_truth if self.n_truth else 0.0

    @property
    def error(self) -> float:
        if not self.n_truth:
            return 0.0
        e = self.efficiency
        return math.sqrt(e * (1.0 - e) / self.n_truth)


def efficiency_table(outcomes, edges, var: str = "pt") -> list[EfficiencyBin]:
    bins = [EfficiencyBin(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
    for o in outcomes:
        if o.category == OUT_OF_ACCEPTANCE:
            continue
        i = _bin_index(getattr(o, var), edges)
        if i < 0:
            continue
        bins[i].n_truth += 1
        bins[i].n_matched += o.category == MATCHED
    return bins


def robust_width(x) -> tuple[float, float]:
    """Half the 68% interquantile range and its approximate error."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float("nan"), float("nan")
    q16, q84 = np.quantile(x, [0.16, 0.84])
    w = 0.5 * float(q84 - q16)
    return w, _QUANTILE_ERR * w / math.sqrt(x.size)


def reco_perigee(o: MuonOutcome, combined: bool):
    """(params, cov) used for the muon, or None when unavailable."""
    trk = o.track
    if trk is None:
        return None
    if combined:
        c = trk.get("combined")
        if not c or not c.get("accepted"):
            return None
        return np.asarray(c["params"]), np.asarray(c["cov"]).reshape(5, 5)
    p = trk.get("perigee")
    if not p:
        return None
    return np.asarray(p["params"]), np.asarray(p["cov"]).reshape(5, 5)


def relative_qop_residual(o: MuonOutcome, combined: bool):
    r = reco_perigee(o, combined)
    if r is None:
        return None
    return (r[0][4] - o.truth[4]) / o.truth[4]


@dataclass
class ResolutionBin:
    lo: float
    hi: float
    standalone: list = field(default_factory=list)
    combined: list = field(default_factory=list)

    def row(self) -> list:
        ws, es = robust_width(self.standalone)
        wc, ec = robust_width(self.combined)
        return [self.lo, self.hi, len(self.standalone), ws, es, len(self.combined), wc, ec]


RESOLUTION_HEADER = ["lo", "hi", "n_standalone", "standalone", "standalone_err",
                     "n_combined", "combined", "combined_err"]
EFFICIENCY_HEADER = ["lo", "hi", "n_truth", "n_matched", "efficiency", "error"]


def resolution_table(outcomes, edges, var: str = "pt") -> list[ResolutionBin]:
    bins = [ResolutionBin(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
    for o in outcomes:
        if o.category != MATCHED:
            continue
        i = _bin_index(getattr(o, var), edges)
        if i < 0:
            continue
        for comb, dest in ((False, bins[i].standalone), (True, bins[i].combined)):
            r = relative_qop_residual(o, comb)
            if r is not None:
                dest.append(r)
    return bins


def pulls(o: MuonOutcome, combined: bool) -> np.ndarray | None:
    r = reco_perigee(o, combined)
    if r is None:
        return None
    x, C = r
    d = x - o.truth
    d[2] = wrap_angle(d[2])
    sig = np.sqrt(np.clip(np.diag(C), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sig > 0, d / sig, np.nan)


def pull_rows(outcomes, combined: bool) -> list[list]:
    rows = []
    for o in outcomes:
        if o.category != MATCHED:
            continue
        p = pulls(o, combined)
        if p is not None:
            rows.append([o.event_id, o.muon, o.pt, o.eta, *[float(v) for v in p]])
    return rows


PULL_HEADER = ["event_id", "muon", "pt", "eta", *[f"pull_{n}" for n in PARAM_NAMES]]


def pull_summary(rows) -> list[list]:
    """Mean and standard deviation of each pull column."""
    out = []
    arr = np.asarray([r[4:] for r in rows], dtype=float).reshape(-1, 5)
    for j, name in enumerate(PARAM_NAMES):
        col = arr[:, j][np.isfinite(arr[:, j])]
        mean = float(col.mean()) if col.size else float("nan")
        std = float(col.std(ddof=1)) if col.size > 1 else float("nan")
        out.append([name, int(col.size), mean, std])
    return out


def chi2_ndof_mean(tracks) -> float:
    vals = [t["chi2"] / t["ndof"] for t in tracks if t.get("ndof", 0) > 0]
    return float(np.mean(vals)) if vals else float("nan")

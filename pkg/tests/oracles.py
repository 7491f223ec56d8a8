"""Independent reference implementations used by the tests."""

import itertools
import math

import numpy as np

from muonpath.segments import SegmentHit


def best_line_fixed_signs(u, w, signed_r):
    """Global least-squares line for fixed left/right signs.

    Residuals are ``n . p_i - c - b_i`` with unit normal ``n = (cos t, sin t)``
    and ``b_i`` the signed radii.  The offset ``c`` is eliminated in closed
    form; the stationary angles are the roots of a quartic in ``z = exp(i t)``,
    each polished by Newton steps.  Returns the minimal sum of squares.
    """
    p = np.column_stack([u, w]).astype(float)
    b = np.asarray(signed_r, dtype=float)
    q = p - p.mean(axis=0)
    bb = b - b.mean()
    S = q.T @ q
    v = q.T @ bb
    D = S[1, 1] - S[0, 0]
    sxy = S[0, 1]
    coeffs = [D / 4j + sxy / 2, v[0] / 2j - v[1] / 2, 0.0, -v[0] / 2j - v[1] / 2,
              -D / 4j + sxy / 2]

    def f(t):
        n = np.array([math.cos(t), math.sin(t)])
        return float(np.sum((q @ n - bb) ** 2))

    def g(t):
        return (0.5 * D * math.sin(2 * t) + sxy * math.cos(2 * t) + math.sin(t) * v[0]
                - math.cos(t) * v[1])

    def dg(t):
        return (D * math.cos(2 * t) - 2 * sxy * math.sin(2 * t) + math.cos(t) * v[0]
                + math.sin(t) * v[1])

    best = math.inf
    for z in np.roots(coeffs):
        t = float(np.angle(z))
        for _ in range(6):
            d = dg(t)
            if d == 0.0:
                break
            t -= g(t) / d
        best = min(best, f(t))
    # coarse scan as a floor in case the quartic degenerates
    for t in np.linspace(0.0, 2 * math.pi, 64, endpoint=False):
        best = min(best, f(float(t)))
    return best


def exhaustive_min_chi2(hits, sigma):
    """Minimum chi2 over all 2^n sign assignments of ``hits``."""
    u = np.array([h.u for h in hits])
    w = np.array([h.w for h in hits])
    r = np.array([h.radius for h in hits])
    best = math.inf
    for signs in itertools.product((-1.0, 1.0), repeat=len(hits)):
        best = min(best, best_line_fixed_signs(u, w, np.array(signs) * r))
    return best / sigma ** 2


def random_station_hits(chamber, rng, sigma=80e-6, max_hits=8):
    """Drift circles of a random straight line through ``chamber`` (smeared)."""
    while True:
        alpha = rng.uniform(-0.35, 0.35)
        w0 = rng.uniform(-0.3, 0.3)
        hits = []
        for layer in range(chamber.n_layers):
            u = chamber.layer_u(layer)
            wc = w0 + math.tan(alpha) * u
            centre = chamber.nearest_tube(layer, wc)
            for idx in (centre - 1, centre, centre + 1):
                wt = chamber.tube_w(layer, idx)
                d = abs(math.cos(alpha) * (wt - w0) - math.sin(alpha) * u)
                if d < chamber.tube_inner_radius:
                    r = min(max(d + rng.normal(0.0, sigma), 0.0), chamber.tube_inner_radius)
                    hits.append(SegmentHit(len(hits), chamber.tube_id(layer, idx), u, wt, r, 1))
        if 4 <= len(hits) <= max_hits:
            return hits, w0, alpha


def stacked_wls(x1, c1, x2, c2):
    """Weighted least squares of the stacked 10x5 system [I; I] x = [x1; x2]."""
    A = np.vstack([np.eye(5), np.eye(5)])
    W = np.zeros((10, 10))
    W[:5, :5] = np.linalg.inv(c1)
    W[5:, 5:] = np.linalg.inv(c2)
    N = A.T @ W @ A
    cov = np.linalg.inv(N)
    x = cov @ (A.T @ W @ np.concatenate([x1, x2]))
    return x, cov

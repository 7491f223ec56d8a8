"""Compiled inner loops: field evaluation and adaptive RK4 transport.

The global state is ``g = (x, y, z, tx, ty, tz, qop)`` with path length as
the independent variable, ``dT/ds = K * qop * T x B``.  The 7x7 transport
Jacobian ``dg(s)/dg(0)`` is integrated alongside from the variational
equations, using the field gradient.
"""

import numpy as np
from numba import njit

C_LIGHT = 0.299792458  # GeV / (T m) per unit charge, also m/ns

STATUS_OK = 0
STATUS_MAX_PATH = 1
STATUS_STUCK = 2

EV_PLANE, EV_CYLINDER, EV_PERIGEE = 0, 1, 2

_H_MAX = 1.0
_H_MIN = 1e-7


@njit(cache=True)
def toroid_inside(params, x, y, z):
    r = np.sqrt(x * x + y * y)
    return params[0] <= r <= params[1] and abs(z) <= params[2]


@njit(cache=True)
def field_eval(kind, params, grid, x, y, z, region=-1):
    """B and dB/dx at a point.

    For the toroid, ``region`` 1/0 forces the inside/outside expression
    regardless of position (the analytic continuation used within one RK
    step); -1 decides from the position.
    """
    b = np.zeros(3)
    gr = np.zeros((3, 3))
    if kind == 1:
        n, rip = params[4], params[5]
        r2 = x * x + y * y
        inside = toroid_inside(params, x, y, z) if region < 0 else region == 1
        if not inside:
            return b, gr
        phi = np.arctan2(y, x)
        c = params[3] * params[0]
        g = c * (1.0 + rip * np.cos(n * phi))
        gphi = -c * rip * n * np.sin(n * phi)
        gx = gphi * (-y / r2)
        gy = gphi * (x / r2)
        r4 = r2 * r2
        b[0] = -g * y / r2
        b[1] = g * x / r2
        gr[0, 0] = -y * gx / r2 + 2.0 * g * x * y / r4
        gr[0, 1] = -y * gy / r2 - g / r2 + 2.0 * g * y * y / r4
        gr[1, 0] = x * gx / r2 + g / r2 - 2.0 * g * x * x / r4
        gr[1, 1] = x * gy / r2 - 2.0 * g * x * y / r4
    elif kind == 2:
        b[0] = params[0]
        b[1] = params[1]
        b[2] = params[2]
    elif kind == 3:
        p = (x, y, z)
        idx = np.zeros(3, dtype=np.int64)
        t = np.zeros(3)
        for a in range(3):
            rel = (p[a] - params[a]) / params[3 + a]
            upper = params[6 + a] - 1.0
            if rel < 0.0 or rel > upper:
                return b, gr
            i = int(np.floor(rel))
            if i > upper - 1:
                i = int(upper - 1)
            idx[a] = i
            t[a] = rel - i
        for di in range(2):
            wx = t[0] if di else 1.0 - t[0]
            dx = 1.0 if di else -1.0
            for dj in range(2):
                wy = t[1] if dj else 1.0 - t[1]
                dy = 1.0 if dj else -1.0
                for dk in range(2):
                    wz = t[2] if dk else 1.0 - t[2]
                    dz = 1.0 if dk else -1.0
                    for c in range(3):
                        v = grid[idx[0] + di, idx[1] + dj, idx[2] + dk, c]
                        b[c] += wx * wy * wz * v
                        gr[c, 0] += dx * wy * wz * v / params[3]
                        gr[c, 1] += wx * dy * wz * v / params[4]
                        gr[c, 2] += wx * wy * dz * v / params[5]
    return b, gr


@njit(cache=True)
def _deriv(g, A, with_jac, kind, params, grid, region):
    b, gr = field_eval(kind, params, grid, g[0], g[1], g[2], region)
    tx, ty, tz, qop = g[3], g[4], g[5], g[6]
    cx = ty * b[2] - tz * b[1]
    cy = tz * b[0] - tx * b[2]
    cz = tx * b[1] - ty * b[0]
    kl = C_LIGHT * qop
    dg = np.empty(7)
    dg[0] = tx
    dg[1] = ty
    dg[2] = tz
    dg[3] = kl * cx
    dg[4] = kl * cy
    dg[5] = kl * cz
    dg[6] = 0.0
    dA = np.zeros((7, 7))
    if with_jac:
        F = np.zeros((7, 7))
        F[0, 3] = 1.0
        F[1, 4] = 1.0
        F[2, 5] = 1.0
        for j in range(3):
            # d(T x B)/dx_j = T x dB/dx_j
            F[3, j] = kl * (ty * gr[2, j] - tz * gr[1, j])
            F[4, j] = kl * (tz * gr[0, j] - tx * gr[2, j])
            F[5, j] = kl * (tx * gr[1, j] - ty * gr[0, j])
        F[3, 4] = kl * b[2]
        F[3, 5] = -kl * b[1]
        F[4, 3] = -kl * b[2]
        F[4, 5] = kl * b[0]
        F[5, 3] = kl * b[1]
        F[5, 4] = -kl * b[0]
        F[3, 6] = C_LIGHT * cx
        F[4, 6] = C_LIGHT * cy
        F[5, 6] = C_LIGHT * cz
        dA = F @ A
    return dg, dA


@njit(cache=True)
def rk4_step(g, A, h, with_jac, kind, params, grid, region=-1):
    if kind == 1 and region < 0:
        region = 1 if toroid_inside(params, g[0], g[1], g[2]) else 0
    k1, l1 = _deriv(g, A, with_jac, kind, params, grid, region)
    k2, l2 = _deriv(g + 0.5 * h * k1, A + 0.5 * h * l1, with_jac, kind, params, grid, region)
    k3, l3 = _deriv(g + 0.5 * h * k2, A + 0.5 * h * l2, with_jac, kind, params, grid, region)
    k4, l4 = _deriv(g + h * k3, A + h * l3, with_jac, kind, params, grid, region)
    g1 = g + h / 6.0 * (k1 + 2.0 * (k2 + k3) + k4)
    A1 = A + h / 6.0 * (l1 + 2.0 * (l2 + l3) + l4)
    return g1, A1


@njit(cache=True)
def _double_step(g, A, h, with_jac, kind, params, grid, region):
    gh, Ah = rk4_step(g, A, 0.5 * h, with_jac, kind, params, grid, region)
    return rk4_step(gh, Ah, 0.5 * h, with_jac, kind, params, grid, region)


@njit(cache=True)
def event_value(ekind, eparams, g):
    if ekind == EV_PLANE:
        return (eparams[3] * (g[0] - eparams[0]) + eparams[4] * (g[1] - eparams[1])
                + eparams[5] * (g[2] - eparams[2]))
    if ekind == EV_CYLINDER:
        return np.sqrt(g[0] * g[0] + g[1] * g[1]) - eparams[0]
    return g[0] * g[3] + g[1] * g[4]


@njit(cache=True)
def _boundary_values(kind, params, g):
    out = np.zeros(4)
    if kind == 1:
        r = np.sqrt(g[0] * g[0] + g[1] * g[1])
        out[0] = r - params[0]
        out[1] = r - params[1]
        out[2] = g[2] - params[2]
        out[3] = g[2] + params[2]
    return out


@njit(cache=True)
def _boundary_grad(kind, params, g, which):
    out = np.zeros(7)
    if which <= 1:
        r = np.sqrt(g[0] * g[0] + g[1] * g[1])
        out[0] = g[0] / r
        out[1] = g[1] / r
    else:
        out[2] = 1.0
    return out


@njit(cache=True)
def _root_step(g, A, h, which, ekind, eparams, kind, params, grid, region, f0, f1):
    """Step length in (0, h) where the event function vanishes (Illinois)."""
    a, b = 0.0, h
    fa, fb = f0, f1
    side = 0
    c = b
    for _ in range(80):
        c = (a * fb - b * fa) / (fb - fa)
        gc, _A = _double_step(g, A, c, False, kind, params, grid, region)
        if which < 0:
            fc = event_value(ekind, eparams, gc)
        else:
            fc = _boundary_values(kind, params, gc)[which]
        if abs(fc) < 1e-13 or abs(b - a) < 1e-14:
            break
        if fc * fb > 0:
            b, fb = c, fc
            if side == -1:
                fa *= 0.5
            side = -1
        else:
            a, fa = c, fc
            if side == 1:
                fb *= 0.5
            side = 1
    return c


@njit(cache=True)
def transport(g0, direction, ekind, eparams, kind, params, grid, tol, max_path, with_jac):
    """Integrate from g0 until the target event function crosses zero.

    Returns (g, A, path_length, status).  ``direction`` is +1 along the
    momentum and -1 against it.  Each step uses the field expression of the
    region it starts in; field-volume boundaries are landed on exactly and
    the Jacobian picks up the saltation term of the discontinuous field.
    """
    g = g0.copy()
    A = np.eye(7)
    s = 0.0
    ft = event_value(ekind, eparams, g)
    if abs(ft) < 1e-12:
        return g, A, s, STATUS_OK
    region = -1
    if kind == 1:
        t = g[3:6]
        region = 1 if toroid_inside(params, g[0] + direction * 1e-9 * t[0],
                                    g[1] + direction * 1e-9 * t[1],
                                    g[2] + direction * 1e-9 * t[2]) else 0
    bv = _boundary_values(kind, params, g)
    h = direction * 0.25
    for _ in range(100000):
        if abs(s) > max_path:
            return g, A, abs(s), STATUS_MAX_PATH
        while True:
            gf, Af = rk4_step(g, A, h, False, kind, params, grid, region)
            g2, A2 = _double_step(g, A, h, with_jac, kind, params, grid, region)
            err = 0.0
            for i in range(3):
                e = abs(g2[i] - gf[i]) / 15.0
                if e > err:
                    err = e
            if err <= tol or abs(h) <= _H_MIN:
                break
            fac = 0.9 * (tol / err) ** 0.2
            if fac < 0.2:
                fac = 0.2
            h *= fac
        ft2 = event_value(ekind, eparams, g2)
        bv2 = _boundary_values(kind, params, g2)
        best_h = np.inf
        best_which = -2
        if ft * ft2 <= 0.0:
            hs = _root_step(g, A, h, -1, ekind, eparams, kind, params, grid, region, ft, ft2)
            best_h = abs(hs)
            best_which = -1
        if kind == 1:
            for k in range(4):
                if abs(bv[k]) > 1e-11 and bv[k] * bv2[k] < 0.0:
                    hs = _root_step(g, A, h, k, ekind, eparams, kind, params, grid, region,
                                    bv[k], bv2[k])
                    if abs(hs) < best_h:
                        best_h = abs(hs)
                        best_which = k
        if best_which == -1:
            g, A = _double_step(g, A, direction * best_h, with_jac, kind, params, grid, region)
            return g, A, abs(s + direction * best_h), STATUS_OK
        if best_which >= 0:
            hs = direction * best_h
            g, A = _double_step(g, A, hs, with_jac, kind, params, grid, region)
            s += hs
            t = g[3:6]
            new_region = 1 if toroid_inside(params, g[0] + direction * 1e-9 * t[0],
                                            g[1] + direction * 1e-9 * t[1],
                                            g[2] + direction * 1e-9 * t[2]) else 0
            if with_jac and new_region != region:
                fm, _d = _deriv(g, A, False, kind, params, grid, region)
                fp, _d = _deriv(g, A, False, kind, params, grid, new_region)
                nb = _boundary_grad(kind, params, g, best_which)
                den = 0.0
                for i in range(7):
                    den += nb[i] * fm[i]
                S = np.eye(7)
                for i in range(7):
                    for j in range(7):
                        S[i, j] += (fp[i] - fm[i]) * nb[j] / den
                A = S @ A
            region = new_region
            ft = event_value(ekind, eparams, g)
            bv = _boundary_values(kind, params, g)
            continue
        g, A = g2, A2
        s += h
        ft = ft2
        bv = bv2
        grow = 4.0 if err == 0.0 else min(4.0, 0.9 * (tol / err) ** 0.2)
        h *= max(grow, 1.0)
        if abs(h) > _H_MAX:
            h = direction * _H_MAX
    return g, A, abs(s), STATUS_STUCK


@njit(cache=True)
def fit_line(u, w, sr, w0, alpha, n_iter):
    """Gauss-Newton line fit to signed drift circles; see hitmodel.fit_line."""
    n = u.size
    for _ in range(n_iter):
        ca, sa = np.cos(alpha), np.sin(alpha)
        a11 = a12 = a22 = g1 = g2 = 0.0
        for i in range(n):
            r = (w[i] - w0) * ca - u[i] * sa - sr[i]
            j1 = -ca
            j2 = -(w[i] - w0) * sa - u[i] * ca
            a11 += j1 * j1
            a12 += j1 * j2
            a22 += j2 * j2
            g1 -= j1 * r
            g2 -= j2 * r
        det = a11 * a22 - a12 * a12
        if det <= 1e-300:
            break
        d0 = (a22 * g1 - a12 * g2) / det
        d1 = (a11 * g2 - a12 * g1) / det
        w0 += d0
        alpha += d1
        if abs(d0) < 1e-14 and abs(d1) < 1e-14:
            break
    ca, sa = np.cos(alpha), np.sin(alpha)
    chi = a11 = a12 = a22 = 0.0
    for i in range(n):
        r = (w[i] - w0) * ca - u[i] * sa - sr[i]
        j1 = -ca
        j2 = -(w[i] - w0) * sa - u[i] * ca
        chi += r * r
        a11 += j1 * j1
        a12 += j1 * j2
        a22 += j2 * j2
    return w0, alpha, chi, a11, a12, a22


@njit(cache=True)
def arc_dca(p0, t, k, u_wire, w_wire):
    """Closest approach of p0 + t s + k s^2/2 to wires parallel to v.

    Returns (distance, signed distance, arc length, v) arrays; see LocalArc.dca.
    """
    n = u_wire.size
    dist = np.empty(n)
    signed = np.empty(n)
    s_out = np.empty(n)
    v_out = np.empty(n)
    tu, tw, ku, kw = t[0], t[2], k[0], k[2]
    for i in range(n):
        s = ((u_wire[i] - p0[0]) * tu + (w_wire[i] - p0[2]) * tw) / (tu * tu + tw * tw)
        for _ in range(4):
            du = p0[0] + tu * s + 0.5 * ku * s * s - u_wire[i]
            dw = p0[2] + tw * s + 0.5 * kw * s * s - w_wire[i]
            gu, gw = tu + ku * s, tw + kw * s
            s -= (du * gu + dw * gw) / (gu * gu + gw * gw + du * ku + dw * kw)
        du = p0[0] + tu * s + 0.5 * ku * s * s - u_wire[i]
        dw = p0[2] + tw * s + 0.5 * kw * s * s - w_wire[i]
        gu, gw = tu + ku * s, tw + kw * s
        d = np.sqrt(du * du + dw * dw)
        dist[i] = d
        signed[i] = d if gu * (-dw) - gw * (-du) >= 0.0 else -d
        s_out[i] = s
        v_out[i] = p0[1] + t[1] * s + 0.5 * k[1] * s * s
    return dist, signed, s_out, v_out

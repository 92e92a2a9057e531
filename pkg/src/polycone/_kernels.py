"""Compiled per-step kernels.

These mirror :func:`polycone.geometry.batch_cones` and
:func:`polycone.barrier.batch_constraints` (the numpy versions are the
reference; tests hold the two together). Everything here works on plain
float arrays so numba can compile it once and cache it on disk.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

ANGLE_TIE_TOL = 1e-12


@njit(cache=True)
def _cone(V, ex, ey, width):
    """Planar cone of one padded CCW polygon ``V`` (n, 2) from ``(ex, ey)``.

    Returns ``(status, tx, ty, kx, ky)`` where status is 0 ok, 1 ego inside or
    on the boundary, 2 degenerate chord.
    """
    n = V.shape[0]
    inside = True
    cx = 0.0
    cy = 0.0
    for j in range(n):
        j2 = j + 1 if j + 1 < n else 0
        wx = V[j2, 0] - V[j, 0]
        wy = V[j2, 1] - V[j, 1]
        if wx * (ey - V[j, 1]) - wy * (ex - V[j, 0]) < 0.0:
            inside = False
        cx += V[j, 0]
        cy += V[j, 1]
    if inside:
        return 1, 0.0, 0.0, 0.0, 0.0
    rx = cx / n - ex
    ry = cy / n - ey
    i1 = 0
    i2 = 0
    best1 = -np.inf
    best2 = np.inf
    for j in range(n):
        dx = V[j, 0] - ex
        dy = V[j, 1] - ey
        rel = math.atan2(rx * dy - ry * dx, rx * dx + ry * dy)
        if rel > best1:
            best1 = rel
            i1 = j
        if rel < best2:
            best2 = rel
            i2 = j
    d1 = math.hypot(V[i1, 0] - ex, V[i1, 1] - ey)
    d2 = math.hypot(V[i2, 0] - ex, V[i2, 1] - ey)
    if d2 < d1 or (d2 == d1 and i2 < i1):
        ia, ib, da, db = i2, i1, d2, d1
    else:
        ia, ib, da, db = i1, i2, d1, d2
    cxh = V[ia, 0] - V[ib, 0]
    cyh = V[ia, 1] - V[ib, 1]
    length = math.hypot(cxh, cyh)
    if length == 0.0:
        return 2, 0.0, 0.0, 0.0, 0.0
    ux = cxh / length
    uy = cyh / length
    hw = 0.5 * width
    tx = 0.5 * (V[ia, 0] + V[ib, 0])
    ty = 0.5 * (V[ia, 1] + V[ib, 1])
    px = tx - ex
    py = ty - ey
    kax = V[ia, 0] + hw * ux - ex
    kay = V[ia, 1] + hw * uy - ey
    kbx = V[ib, 0] - hw * ux - ex
    kby = V[ib, 1] - hw * uy - ey
    pn = math.hypot(px, py)
    ca = (px * kax + py * kay) / (pn * math.hypot(kax, kay))
    cb = (px * kbx + py * kby) / (pn * math.hypot(kbx, kby))
    if abs(ca - cb) <= ANGLE_TIE_TOL:
        a_first = da < db or (da == db and ia < ib)
    else:
        a_first = ca < cb
    if a_first:
        return 0, tx, ty, kax, kay
    return 0, tx, ty, kbx, kby


@njit(cache=True)
def _row(p, v, k, a0, B, eps_v, khat_drift, lgh_out):
    """Cone-constraint row; writes ``L_g h`` into ``lgh_out``. Returns (h, lfh, ok)."""
    dim = p.shape[0]
    kn = 0.0
    vn = 0.0
    for i in range(dim):
        kn += k[i] * k[i]
        vn += v[i] * v[i]
    kn = math.sqrt(kn)
    vn = math.sqrt(vn)
    ok = vn > eps_v
    safe_vn = vn if ok else 1.0
    pk = 0.0
    vk = 0.0
    pv = 0.0
    vv = 0.0
    for i in range(dim):
        pk += p[i] * k[i] / kn
        vk += v[i] * k[i] / kn
        pv += p[i] * v[i]
        vv += v[i] * v[i]
    s = pk / safe_vn
    qa = 0.0
    for j in range(lgh_out.shape[0]):
        lgh_out[j] = 0.0
    for i in range(dim):
        qi = p[i] + v[i] * s
        qa += qi * a0[i]
        for j in range(lgh_out.shape[0]):
            lgh_out[j] -= qi * B[i, j]
    h = pv + vn * pk
    lfh = vv + vn * vk - qa
    if khat_drift:
        lfh += vn * (pv - pk * vk) / kn
    return h, lfh, ok


@njit(cache=True)
def planar_constraints(V, ego, width, vrel, a0, B, eps_v, khat_drift):
    """Rows for every obstacle in the plane.

    Returns ``(h, lfh, lgh, ok, inside)``; rows with the ego inside (or a
    degenerate chord) are NaN with ``ok`` false.
    """
    n = V.shape[0]
    m = B.shape[1]
    h = np.full(n, np.nan)
    lfh = np.full(n, np.nan)
    lgh = np.full((n, m), np.nan)
    ok = np.zeros(n, np.bool_)
    inside = np.zeros(n, np.bool_)
    p = np.empty(2)
    k = np.empty(2)
    row = np.empty(m)
    for i in range(n):
        st, tx, ty, kx, ky = _cone(V[i], ego[0], ego[1], width)
        if st == 1:
            inside[i] = True
            continue
        if st == 2:
            continue
        p[0] = tx - ego[0]
        p[1] = ty - ego[1]
        k[0] = kx
        k[1] = ky
        hi, li, oki = _row(p, vrel[i], k, a0, B, eps_v, khat_drift, row)
        h[i] = hi
        lfh[i] = li
        lgh[i] = row
        ok[i] = oki
    return h, lfh, lgh, ok, inside


@njit(cache=True)
def spatial_constraints(V, centers, zr, cdot, ego, width, bvel, a0, B, eps_v, khat_drift):
    """3-D rows: per obstacle the horizontal or the vertical projected cone.

    Returns ``(h, lfh, lgh, ok, inside, plane)`` with plane 0 horizontal, 1
    vertical.
    """
    n = V.shape[0]
    nv = V.shape[1]
    m = B.shape[1]
    h = np.full(n, np.nan)
    lfh = np.full(n, np.nan)
    lgh = np.full((n, m), np.nan)
    ok = np.zeros(n, np.bool_)
    inside = np.zeros(n, np.bool_)
    plane = np.zeros(n, np.int64)
    rect = np.empty((4, 2))
    p = np.empty(3)
    k = np.empty(3)
    v = np.empty(3)
    Pa0 = np.empty(3)
    PB = np.empty((3, m))
    row = np.empty(m)
    ex, ey, ez = ego[0], ego[1], ego[2]
    for i in range(n):
        sth, thx, thy, khx, khy = _cone(V[i], ex, ey, width)
        dx = centers[i, 0] - ex
        dy = centers[i, 1] - ey
        dn = math.hypot(dx, dy)
        if dn > 0:
            dx /= dn
            dy /= dn
        else:
            dx, dy = 1.0, 0.0
        s_lo = np.inf
        s_hi = -np.inf
        for j in range(nv):
            s = (V[i, j, 0] - ex) * dx + (V[i, j, 1] - ey) * dy
            s_lo = min(s_lo, s)
            s_hi = max(s_hi, s)
        rect[0, 0] = s_lo
        rect[0, 1] = zr[i, 0]
        rect[1, 0] = s_hi
        rect[1, 1] = zr[i, 0]
        rect[2, 0] = s_hi
        rect[2, 1] = zr[i, 1]
        rect[3, 0] = s_lo
        rect[3, 1] = zr[i, 1]
        stv, tvs, tvz, kvs, kvz = _cone(rect, 0.0, ez, width)
        nkh = math.hypot(khx, khy) if sth == 0 else np.inf
        nkv = math.hypot(kvs, kvz) if stv == 0 else np.inf
        if sth == 1 and stv == 1:
            inside[i] = True
            continue
        if nkh == np.inf and nkv == np.inf:
            continue
        wx = cdot[i, 0] - bvel[0]
        wy = cdot[i, 1] - bvel[1]
        wz = cdot[i, 2] - bvel[2]
        if nkh <= nkv:
            p[0] = thx - ex
            p[1] = thy - ey
            p[2] = 0.0
            k[0] = khx
            k[1] = khy
            k[2] = 0.0
            v[0] = wx
            v[1] = wy
            v[2] = 0.0
            Pa0[0] = a0[0]
            Pa0[1] = a0[1]
            Pa0[2] = 0.0
            for j in range(m):
                PB[0, j] = B[0, j]
                PB[1, j] = B[1, j]
                PB[2, j] = 0.0
        else:
            plane[i] = 1
            p[0] = tvs * dx
            p[1] = tvs * dy
            p[2] = tvz - ez
            k[0] = kvs * dx
            k[1] = kvs * dy
            k[2] = kvz
            sw = wx * dx + wy * dy
            v[0] = sw * dx
            v[1] = sw * dy
            v[2] = wz
            sa = a0[0] * dx + a0[1] * dy
            Pa0[0] = sa * dx
            Pa0[1] = sa * dy
            Pa0[2] = a0[2]
            for j in range(m):
                sb = B[0, j] * dx + B[1, j] * dy
                PB[0, j] = sb * dx
                PB[1, j] = sb * dy
                PB[2, j] = B[2, j]
        hi, li, oki = _row(p, v, k, Pa0, PB, eps_v, khat_drift, row)
        h[i] = hi
        lfh[i] = li
        lgh[i] = row
        ok[i] = oki
    return h, lfh, lgh, ok, inside, plane


@njit(cache=True)
def signed_distances(V, px, py):
    """Signed distance from ``(px, py)`` to each padded CCW polygon in ``V``."""
    n = V.shape[0]
    nv = V.shape[1]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        inside = True
        for j in range(nv):
            j2 = j + 1 if j + 1 < nv else 0
            ax = V[i, j, 0]
            ay = V[i, j, 1]
            wx = V[i, j2, 0] - ax
            wy = V[i, j2, 1] - ay
            qx = px - ax
            qy = py - ay
            ww = wx * wx + wy * wy
            if ww > 0.0 and wx * qy - wy * qx <= 0.0:
                inside = False
            t = 0.0
            if ww > 0.0:
                t = min(max((qx * wx + qy * wy) / ww, 0.0), 1.0)
            d = math.hypot(qx - t * wx, qy - t * wy)
            if d < best:
                best = d
        out[i] = -best if inside else best
    return out


@njit(cache=True)
def project_dual(G, c, x0, max_iter, feas_tol):
    """Goldfarb-Idnani projection of ``x0`` onto ``{G x >= c}``.

    Returns ``(x, lam, act, n_act, status)``: status 0 converged, 1 empty
    set (``act[0]`` holds the blocking row), 2 iteration limit.
    """
    nrow = G.shape[0]
    dim = G.shape[1]
    x = x0.copy()
    act = np.empty(nrow + 1, np.int64)
    lam = np.zeros(nrow + 1)
    na = 0
    scale = 1.0 + np.abs(c)
    for _ in range(max_iter):
        p = -1
        worst = -feas_tol
        for i in range(nrow):
            vi = (G[i] @ x - c[i]) / scale[i]
            if vi < worst:
                worst = vi
                p = i
        if p < 0:
            return x, lam[:na].copy(), act[:na].copy(), na, 0
        lam_p = 0.0
        npv = G[p]
        while True:
            if na > 0:
                N = np.empty((dim, na))
                for j in range(na):
                    N[:, j] = G[act[j]]
                # active normals stay linearly independent, so N^T N is invertible
                r = np.linalg.solve(N.T @ N, N.T @ npv)
                z = npv - N @ r
            else:
                r = np.zeros(0)
                z = npv.copy()
            t1 = np.inf
            kk = -1
            for j in range(na):
                if r[j] > 1e-14:
                    tj = lam[j] / r[j]
                    if tj < t1:
                        t1 = tj
                        kk = j
            zz = z @ npv
            if zz <= 1e-14 * max(1.0, npv @ npv):
                t2 = np.inf
            else:
                t2 = -(npv @ x - c[p]) / zz
            if t1 == np.inf and t2 == np.inf:
                act[0] = p
                return x, lam[:0].copy(), act[:1].copy(), 0, 1
            if t2 == np.inf:
                for j in range(na):
                    lam[j] -= t1 * r[j]
                lam_p += t1
                for j in range(kk, na - 1):
                    act[j] = act[j + 1]
                    lam[j] = lam[j + 1]
                na -= 1
                continue
            t = min(t1, t2)
            for i in range(dim):
                x[i] += t * z[i]
            for j in range(na):
                lam[j] -= t * r[j]
            lam_p += t
            if t == t2:
                act[na] = p
                lam[na] = lam_p
                na += 1
                break
            for j in range(kk, na - 1):
                act[j] = act[j + 1]
                lam[j] = lam[j + 1]
            na -= 1
    return x, lam[:na].copy(), act[:na].copy(), na, 2


# Row layout of the merged step output: h, lfh, psi, flags, then L_g h.
FLAG_INSIDE = 1
FLAG_USABLE = 2
FLAG_ACTIVE = 4
FLAG_CULLED = 8
ROW_H, ROW_LFH, ROW_PSI, ROW_FLAGS, ROW_LGH = 0, 1, 2, 3, 4

STEP_OK, STEP_INFEASIBLE, STEP_MAX_ITER, STEP_ZERO_GRADIENT = 0, 1, 2, 3


@njit(cache=True)
def _polygon_distance(V, px, py):
    best = np.inf
    inside = True
    nv = V.shape[0]
    for j in range(nv):
        j2 = j + 1 if j + 1 < nv else 0
        ax = V[j, 0]
        ay = V[j, 1]
        wx = V[j2, 0] - ax
        wy = V[j2, 1] - ay
        qx = px - ax
        qy = py - ay
        ww = wx * wx + wy * wy
        if ww > 0.0 and wx * qy - wy * qx <= 0.0:
            inside = False
        t = 0.0
        if ww > 0.0:
            t = min(max((qx * wx + qy * wy) / ww, 0.0), 1.0)
        d = math.hypot(qx - t * wx, qy - t * wy)
        if d < best:
            best = d
    return -best if inside else best


@njit(cache=True)
def _solve_rows(out, ref, gamma, max_iter, feas_tol, eps_grad):
    """Min-norm QP over the usable rows of ``out`` (no input bounds).

    Fills ``psi`` and the active flag in place; returns ``(u, status, row)``
    where ``row`` is the blocking/offending obstacle index or -1.
    """
    n = out.shape[0]
    m = ref.shape[0]
    rows = np.empty(n, np.int64)
    nr = 0
    for i in range(n):
        if int(out[i, ROW_FLAGS]) & FLAG_USABLE:
            rows[nr] = i
            nr += 1
    A = np.empty((nr, m))
    b = np.empty(nr)
    all_ok = True
    for r in range(nr):
        i = rows[r]
        psi = 0.0
        for j in range(m):
            A[r, j] = out[i, ROW_LGH + j]
            psi += A[r, j] * ref[j]
        b[r] = -out[i, ROW_LFH] - gamma * out[i, ROW_H]
        psi -= b[r]
        out[i, ROW_PSI] = psi
        if not psi >= 0.0:
            all_ok = False
    if all_ok:
        return ref.copy(), STEP_OK, -1
    if nr == 1:
        i = rows[0]
        aa = 0.0
        for j in range(m):
            aa += A[0, j] * A[0, j]
        if math.sqrt(aa) < eps_grad:
            return ref.copy(), STEP_ZERO_GRADIENT, i
        u = ref - A[0] * (out[i, ROW_PSI] / aa)
        out[i, ROW_FLAGS] += FLAG_ACTIVE
        return u, STEP_OK, -1
    x, lam, act, na, status = project_dual(A, b, ref, max_iter, feas_tol)
    if status == 1:
        return x, STEP_INFEASIBLE, rows[act[0]]
    if status == 2:
        return x, STEP_MAX_ITER, -1
    for j in range(na):
        if lam[j] > 0:
            out[rows[act[j]], ROW_FLAGS] += FLAG_ACTIVE
    return x, STEP_OK, -1


@njit(cache=True)
def planar_step(V0, vel, ego, bvel, a0, B, ref, prm):
    """Constraint rows and the filtered input in one call (planar models).

    ``prm`` = ``[t, width, eps_v, khat_drift, gamma, cull_radius, solve,
    max_iter, feas_tol, eps_grad]``. Returns ``(u, out, status, row)``;
    ``out`` rows follow the ``ROW_*`` layout. With ``solve`` zero only the
    rows are built.
    """
    t, width, eps_v = prm[0], prm[1], prm[2]
    khat_drift = prm[3] != 0.0
    gamma, cull = prm[4], prm[5]
    n = V0.shape[0]
    nv = V0.shape[1]
    m = B.shape[1]
    out = np.full((n, ROW_LGH + m), np.nan)
    Vi = np.empty((nv, 2))
    p = np.empty(2)
    k = np.empty(2)
    v = np.empty(2)
    row = np.empty(m)
    for i in range(n):
        for j in range(nv):
            Vi[j, 0] = V0[i, j, 0] + vel[i, 0] * t
            Vi[j, 1] = V0[i, j, 1] + vel[i, 1] * t
        flags = 0
        if cull < np.inf and _polygon_distance(Vi, ego[0], ego[1]) > cull:
            flags |= FLAG_CULLED
        st, tx, ty, kx, ky = _cone(Vi, ego[0], ego[1], width)
        if st == 1:
            out[i, ROW_FLAGS] = flags | FLAG_INSIDE
            continue
        if st == 2:
            out[i, ROW_FLAGS] = flags
            continue
        p[0] = tx - ego[0]
        p[1] = ty - ego[1]
        k[0] = kx
        k[1] = ky
        v[0] = vel[i, 0] - bvel[0]
        v[1] = vel[i, 1] - bvel[1]
        hi, li, oki = _row(p, v, k, a0, B, eps_v, khat_drift, row)
        out[i, ROW_H] = hi
        out[i, ROW_LFH] = li
        for j in range(m):
            out[i, ROW_LGH + j] = row[j]
        if oki and not flags & FLAG_CULLED:
            flags |= FLAG_USABLE
        out[i, ROW_FLAGS] = flags
    if prm[6] == 0.0:
        return ref.copy(), out, STEP_OK, -1
    u, status, r = _solve_rows(out, ref, gamma, int(prm[7]), prm[8], prm[9])
    return u, out, status, r


@njit(cache=True)
def spatial_step(V0, vel, centers0, zr0, ego, bvel, a0, B, ref, prm):
    """3-D counterpart of :func:`planar_step`; ``vel`` is (n, 3).

    Column ``ROW_LGH + m`` of ``out`` holds the plane (0 horizontal, 1
    vertical).
    """
    t, width, eps_v = prm[0], prm[1], prm[2]
    khat_drift = prm[3] != 0.0
    gamma, cull = prm[4], prm[5]
    n = V0.shape[0]
    nv = V0.shape[1]
    m = B.shape[1]
    out = np.full((n, ROW_LGH + m + 1), np.nan)
    V = np.empty((n, nv, 2))
    centers = np.empty((n, 2))
    zr = np.empty((n, 2))
    cdot = np.empty((n, 3))
    for i in range(n):
        for j in range(nv):
            V[i, j, 0] = V0[i, j, 0] + vel[i, 0] * t
            V[i, j, 1] = V0[i, j, 1] + vel[i, 1] * t
        centers[i, 0] = centers0[i, 0] + vel[i, 0] * t
        centers[i, 1] = centers0[i, 1] + vel[i, 1] * t
        zr[i, 0] = zr0[i, 0] + vel[i, 2] * t
        zr[i, 1] = zr0[i, 1] + vel[i, 2] * t
        cdot[i, 0] = vel[i, 0]
        cdot[i, 1] = vel[i, 1]
        cdot[i, 2] = vel[i, 2]
    h, lfh, lgh, ok, inside, plane = spatial_constraints(V, centers, zr, cdot, ego, width, bvel, a0, B, eps_v,
                                                         khat_drift)
    for i in range(n):
        flags = 0
        if cull < np.inf and _polygon_distance(V[i], ego[0], ego[1]) > cull:
            flags |= FLAG_CULLED
        if inside[i]:
            flags |= FLAG_INSIDE
        elif ok[i] and not flags & FLAG_CULLED:
            flags |= FLAG_USABLE
        out[i, ROW_H] = h[i]
        out[i, ROW_LFH] = lfh[i]
        out[i, ROW_FLAGS] = flags
        for j in range(m):
            out[i, ROW_LGH + j] = lgh[i, j]
        out[i, ROW_LGH + m] = plane[i]
    if prm[6] == 0.0:
        return ref.copy(), out, STEP_OK, -1
    u, status, r = _solve_rows(out, ref, gamma, int(prm[7]), prm[8], prm[9])
    return u, out, status, r


@njit(cache=True)
def quadrotor_body(x, l, inertia, torque_map, mass, gravity):
    """Body-center position, velocity and acceleration split ``(a0, B)``.

    Same quantities as ``Quadrotor.body_center/body_velocity/body_acceleration``.
    """
    cf, sf = math.cos(x[6]), math.sin(x[6])
    ct, st = math.cos(x[7]), math.sin(x[7])
    cp, sp = math.cos(x[8]), math.sin(x[8])
    R = np.empty((3, 3))
    R[0, 0] = cp * ct
    R[0, 1] = cp * st * sf - sp * cf
    R[0, 2] = cp * st * cf + sp * sf
    R[1, 0] = sp * ct
    R[1, 1] = sp * st * sf + cp * cf
    R[1, 2] = sp * st * cf - cp * sf
    R[2, 0] = -st
    R[2, 1] = ct * sf
    R[2, 2] = ct * cf
    w0, w1, w2 = x[9], x[10], x[11]
    center = np.empty(3)
    vel = np.empty(3)
    a0 = np.empty(3)
    # S @ w = (w1, -w0, 0); w x (w x l e3) = l (w0 w2, w1 w2, -(w0^2 + w1^2))
    I0, I1, I2 = inertia[0], inertia[1], inertia[2]
    wd0 = -(w1 * I2 * w2 - w2 * I1 * w1) / I0
    wd1 = -(w2 * I0 * w0 - w0 * I2 * w2) / I1
    b0 = l * (w0 * w2) + l * wd1
    b1 = l * (w1 * w2) - l * wd0
    b2 = -l * (w0 * w0 + w1 * w1)
    for i in range(3):
        center[i] = x[i] + l * R[i, 2]
        vel[i] = x[3 + i] + l * (R[i, 0] * w1 - R[i, 1] * w0)
        a0[i] = R[i, 0] * b0 + R[i, 1] * b1 + R[i, 2] * b2
    a0[2] -= gravity
    m = torque_map.shape[1]
    B = np.empty((3, m))
    for i in range(3):
        for j in range(m):
            B[i, j] = R[i, 2] / mass + l * (R[i, 0] * torque_map[1, j] - R[i, 1] * torque_map[0, j])
    return center, vel, a0, B


_warm = False


def warmup():
    """Compile (or load from cache) every kernel once per process."""
    global _warm
    if _warm:
        return
    V = np.array([[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]])
    B2 = np.eye(2)
    planar_constraints(V, np.array([-2.0, 0.5]), 0.1, np.array([[1.0, 0.0]]), np.zeros(2), B2, 1e-6, True)
    spatial_constraints(V, np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]]), np.zeros((1, 3)),
                        np.array([-2.0, 0.5, 0.5]), 0.1, np.array([1.0, 0.0, 0.0]), np.zeros(3),
                        np.ones((3, 4)), 1e-6, True)
    signed_distances(V, 2.0, 0.0)
    project_dual(np.eye(2), np.ones(2), np.zeros(2), 10, 1e-12)
    prm = np.array([0.0, 0.1, 1e-6, 1.0, 1.0, np.inf, 1.0, 100.0, 1e-12, 1e-10])
    planar_step(V, np.zeros((1, 2)), np.array([-2.0, 0.5]), np.array([1.0, 0.0]), np.zeros(2), B2,
                np.zeros(2), prm)
    spatial_step(V, np.zeros((1, 3)), np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]]), np.array([-2.0, 0.5, 0.5]),
                 np.array([1.0, 0.0, 0.0]), np.zeros(3), np.ones((3, 4)), np.zeros(4), prm)
    quadrotor_body(np.zeros(12), 0.1, np.ones(3), np.ones((3, 4)), 1.0, 9.81)
    _warm = True

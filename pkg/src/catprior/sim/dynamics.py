"""Planar multibody dynamics kernels (numba).

A world is a set of articulated tree systems (characters, props).  Each
system is described by generalized coordinates

    g = [com_x, com_y, root_angle, joint_1, ..., joint_J]

i.e. the floating base is parametrised by the system centre of mass.  With
that choice the mass matrix is block diagonal (translation block ``m I``),
gravity only acts on the COM rows and internal forces never change the
total linear momentum.

One substep is semi-implicit Euler:

1. velocity-product (Coriolis/centrifugal) forces from the current state,
2. stable PD: joint torques ``kp (q_hat - q - h u') - kd u'`` solved
   implicitly, with torque-limit clamping resolved by re-solving,
3. impulse contacts (ground + probe/shape pairs between systems) with a
   projected Gauss-Seidel solver using the effective inverse mass,
4. ``g += h u'``.

Body poses are always recomputed from ``g`` by forward kinematics.
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np
from numba import njit

WorldSpec = namedtuple(
    "WorldSpec",
    [
        "sys_coord0", "sys_ncoord", "sys_body0", "sys_nbody", "sys_mass",
        "body_parent", "body_sys", "body_jcoord", "body_anchor", "body_com",
        "body_mass", "body_inertia", "anc", "coord_pivot",
        "coord_kp", "coord_kd", "coord_taulim", "coord_act",
        "gp_body", "gp_local", "gp_radius",
        "pp_body", "pp_local", "pp_radius", "pp_shape",
        "shape_kind", "shape_a", "shape_b", "shape_radius", "shape_half",
        "phys", "iphys",
    ],
)
# phys = [gravity, ground, friction, dt, baumgarte, slop, speculative]
# iphys = [substeps, pgs_iterations]

CONTACT_GAP = 0.02


@njit(cache=True)
def forward_kinematics(spec, g, angle, origin, com):
    n_sys = spec.sys_coord0.shape[0]
    for s in range(n_sys):
        b0 = spec.sys_body0[s]
        nb = spec.sys_nbody[s]
        c0 = spec.sys_coord0[s]
        for b in range(b0, b0 + nb):
            p = spec.body_parent[b]
            if p < 0:
                angle[b] = g[c0 + 2]
                origin[b, 0] = 0.0
                origin[b, 1] = 0.0
            else:
                angle[b] = angle[p] + g[spec.body_jcoord[b]]
                ca = np.cos(angle[p])
                sa = np.sin(angle[p])
                ax = spec.body_anchor[b, 0]
                ay = spec.body_anchor[b, 1]
                origin[b, 0] = origin[p, 0] + ca * ax - sa * ay
                origin[b, 1] = origin[p, 1] + sa * ax + ca * ay
            cb = np.cos(angle[b])
            sb = np.sin(angle[b])
            cx = spec.body_com[b, 0]
            cy = spec.body_com[b, 1]
            com[b, 0] = origin[b, 0] + cb * cx - sb * cy
            com[b, 1] = origin[b, 1] + sb * cx + cb * cy
        mx = 0.0
        my = 0.0
        for b in range(b0, b0 + nb):
            mx += spec.body_mass[b] * com[b, 0]
            my += spec.body_mass[b] * com[b, 1]
        dx = g[c0] - mx / spec.sys_mass[s]
        dy = g[c0 + 1] - my / spec.sys_mass[s]
        for b in range(b0, b0 + nb):
            origin[b, 0] += dx
            origin[b, 1] += dy
            com[b, 0] += dx
            com[b, 1] += dy


@njit(cache=True)
def angular_velocities(spec, u, omega):
    n_sys = spec.sys_coord0.shape[0]
    for s in range(n_sys):
        b0 = spec.sys_body0[s]
        for b in range(b0, b0 + spec.sys_nbody[s]):
            p = spec.body_parent[b]
            if p < 0:
                omega[b] = u[spec.sys_coord0[s] + 2]
            else:
                omega[b] = omega[p] + u[spec.body_jcoord[b]]


@njit(cache=True)
def com_jacobian_shift(spec, origin, com, dcom):
    """dcom[k] = d(system COM in the root-origin chain) / d coordinate k."""
    n = dcom.shape[0]
    for k in range(n):
        dcom[k, 0] = 0.0
        dcom[k, 1] = 0.0
    n_sys = spec.sys_coord0.shape[0]
    for s in range(n_sys):
        b0 = spec.sys_body0[s]
        c0 = spec.sys_coord0[s]
        for k in range(c0 + 2, c0 + spec.sys_ncoord[s]):
            pv = spec.coord_pivot[k]
            sx = 0.0
            sy = 0.0
            for b in range(b0, b0 + spec.sys_nbody[s]):
                if spec.anc[b, k] > 0.0:
                    sx += spec.body_mass[b] * (-(com[b, 1] - origin[pv, 1]))
                    sy += spec.body_mass[b] * (com[b, 0] - origin[pv, 0])
            dcom[k, 0] = sx / spec.sys_mass[s]
            dcom[k, 1] = sy / spec.sys_mass[s]


@njit(cache=True)
def point_jacobian(spec, b, px, py, origin, dcom, jx, jy):
    """Rows d(point velocity)/du for a world point rigidly attached to body b."""
    s = spec.body_sys[b]
    c0 = spec.sys_coord0[s]
    jx[c0] += 1.0
    jy[c0 + 1] += 1.0
    for k in range(c0 + 2, c0 + spec.sys_ncoord[s]):
        vx = -dcom[k, 0]
        vy = -dcom[k, 1]
        if spec.anc[b, k] > 0.0:
            pv = spec.coord_pivot[k]
            vx += -(py - origin[pv, 1])
            vy += px - origin[pv, 0]
        jx[k] += vx
        jy[k] += vy


@njit(cache=True)
def body_velocities(spec, g, u, angle, origin, com, omega, vcom):
    forward_kinematics(spec, g, angle, origin, com)
    angular_velocities(spec, u, omega)
    n = g.shape[0]
    dcom = np.zeros((n, 2))
    com_jacobian_shift(spec, origin, com, dcom)
    jx = np.zeros(n)
    jy = np.zeros(n)
    for b in range(spec.body_parent.shape[0]):
        jx[:] = 0.0
        jy[:] = 0.0
        point_jacobian(spec, b, com[b, 0], com[b, 1], origin, dcom, jx, jy)
        vcom[b, 0] = jx @ u
        vcom[b, 1] = jy @ u


@njit(cache=True)
def _solve_system_block(spec, s, g, u, target, origin, com, omega, dcom, h, u_new, winv):
    c0 = spec.sys_coord0[s]
    ni = spec.sys_ncoord[s] - 2
    b0 = spec.sys_body0[s]
    nb = spec.sys_nbody[s]
    M = np.zeros((ni, ni))
    Q = np.zeros(ni)
    avp_o = np.zeros((nb, 2))
    J = np.zeros((2, ni))
    for bi in range(nb):
        b = b0 + bi
        p = spec.body_parent[b]
        if p >= 0:
            pi = p - b0
            w2 = omega[p] * omega[p]
            avp_o[bi, 0] = avp_o[pi, 0] - w2 * (origin[b, 0] - origin[p, 0])
            avp_o[bi, 1] = avp_o[pi, 1] - w2 * (origin[b, 1] - origin[p, 1])
        w2b = omega[b] * omega[b]
        ax = avp_o[bi, 0] - w2b * (com[b, 0] - origin[b, 0])
        ay = avp_o[bi, 1] - w2b * (com[b, 1] - origin[b, 1])
        for k in range(ni):
            kc = c0 + 2 + k
            vx = -dcom[kc, 0]
            vy = -dcom[kc, 1]
            if spec.anc[b, kc] > 0.0:
                pv = spec.coord_pivot[kc]
                vx += -(com[b, 1] - origin[pv, 1])
                vy += com[b, 0] - origin[pv, 0]
            J[0, k] = vx
            J[1, k] = vy
        m = spec.body_mass[b]
        inertia = spec.body_inertia[b]
        for k in range(ni):
            kc = c0 + 2 + k
            Q[k] -= m * (J[0, k] * ax + J[1, k] * ay)
            for l in range(ni):
                lc = c0 + 2 + l
                M[k, l] += m * (J[0, k] * J[0, l] + J[1, k] * J[1, l]) + inertia * spec.anc[b, kc] * spec.anc[b, lc]
    u_int = u[c0 + 2:c0 + 2 + ni].copy()
    base_rhs = M @ u_int + h * Q
    clamped = np.zeros(ni, dtype=np.int64)
    tau_fixed = np.zeros(ni)
    A = M.copy()
    x = np.zeros(ni)
    for _ in range(ni + 1):
        A = M.copy()
        rhs = base_rhs.copy()
        for k in range(ni):
            kc = c0 + 2 + k
            if spec.coord_act[kc] == 0:
                continue
            if clamped[k] == 0:
                A[k, k] += h * (spec.coord_kd[kc] + h * spec.coord_kp[kc])
                rhs[k] += h * spec.coord_kp[kc] * (target[kc] - g[kc])
            else:
                rhs[k] += h * tau_fixed[k]
        x = np.linalg.solve(A, rhs)
        changed = False
        for k in range(ni):
            kc = c0 + 2 + k
            if spec.coord_act[kc] == 0 or clamped[k] == 1:
                continue
            tau = spec.coord_kp[kc] * (target[kc] - g[kc] - h * x[k]) - spec.coord_kd[kc] * x[k]
            lim = spec.coord_taulim[kc]
            if tau > lim:
                clamped[k] = 1
                tau_fixed[k] = lim
                changed = True
            elif tau < -lim:
                clamped[k] = 1
                tau_fixed[k] = -lim
                changed = True
        if not changed:
            break
    ms = spec.sys_mass[s]
    u_new[c0] = u[c0]
    u_new[c0 + 1] = u[c0 + 1] - h * spec.phys[0]
    for k in range(ni):
        u_new[c0 + 2 + k] = x[k]
    winv[c0, c0] = 1.0 / ms
    winv[c0 + 1, c0 + 1] = 1.0 / ms
    Ainv = np.linalg.inv(A)
    for k in range(ni):
        for l in range(ni):
            winv[c0 + 2 + k, c0 + 2 + l] = Ainv[k, l]


@njit(cache=True)
def _box_contact(spec, sb, angle, com, px, py, r, out):
    # out = [depth, nx, ny, cx, cy]
    ca = np.cos(angle[sb])
    sa = np.sin(angle[sb])
    dx = px - com[sb, 0]
    dy = py - com[sb, 1]
    lx = ca * dx + sa * dy
    ly = -sa * dx + ca * dy
    hw = spec.shape_half[sb, 0]
    hh = spec.shape_half[sb, 1]
    if abs(lx) <= hw and abs(ly) <= hh:
        pen_x = hw - abs(lx)
        pen_y = hh - abs(ly)
        if pen_x < pen_y:
            nlx = 1.0 if lx >= 0 else -1.0
            nly = 0.0
            qx = nlx * hw
            qy = ly
            depth = r + pen_x
        else:
            nlx = 0.0
            nly = 1.0 if ly >= 0 else -1.0
            qx = lx
            qy = nly * hh
            depth = r + pen_y
    else:
        qx = min(max(lx, -hw), hw)
        qy = min(max(ly, -hh), hh)
        ex = lx - qx
        ey = ly - qy
        d = np.sqrt(ex * ex + ey * ey)
        nlx = ex / d
        nly = ey / d
        depth = r - d
    out[0] = depth
    out[1] = ca * nlx - sa * nly
    out[2] = sa * nlx + ca * nly
    out[3] = com[sb, 0] + ca * qx - sa * qy
    out[4] = com[sb, 1] + sa * qx + ca * qy


@njit(cache=True)
def _capsule_contact(spec, sb, angle, origin, px, py, r, out):
    ca = np.cos(angle[sb])
    sa = np.sin(angle[sb])
    ax = origin[sb, 0] + ca * spec.shape_a[sb, 0] - sa * spec.shape_a[sb, 1]
    ay = origin[sb, 1] + sa * spec.shape_a[sb, 0] + ca * spec.shape_a[sb, 1]
    bx = origin[sb, 0] + ca * spec.shape_b[sb, 0] - sa * spec.shape_b[sb, 1]
    by = origin[sb, 1] + sa * spec.shape_b[sb, 0] + ca * spec.shape_b[sb, 1]
    ex = bx - ax
    ey = by - ay
    ll = ex * ex + ey * ey
    t = 0.0
    if ll > 0.0:
        t = ((px - ax) * ex + (py - ay) * ey) / ll
        t = min(max(t, 0.0), 1.0)
    cx = ax + t * ex
    cy = ay + t * ey
    dx = px - cx
    dy = py - cy
    d = np.sqrt(dx * dx + dy * dy)
    R = spec.shape_radius[sb]
    if d > 1e-12:
        nx = dx / d
        ny = dy / d
    else:
        nx = 0.0
        ny = 1.0
    out[0] = R + r - d
    out[1] = nx
    out[2] = ny
    out[3] = cx + R * nx
    out[4] = cy + R * ny


@njit(cache=True)
def substep(spec, g, u, target, facc, acc_scale):
    n = g.shape[0]
    nb = spec.body_parent.shape[0]
    n_sys = spec.sys_coord0.shape[0]
    h = spec.phys[3]
    angle = np.zeros(nb)
    origin = np.zeros((nb, 2))
    com = np.zeros((nb, 2))
    omega = np.zeros(nb)
    dcom = np.zeros((n, 2))
    forward_kinematics(spec, g, angle, origin, com)
    angular_velocities(spec, u, omega)
    com_jacobian_shift(spec, origin, com, dcom)

    u_new = np.zeros(n)
    winv = np.zeros((n, n))
    for s in range(n_sys):
        _solve_system_block(spec, s, g, u, target, origin, com, omega, dcom, h, u_new, winv)

    # ---- contacts
    n_gp = spec.gp_body.shape[0]
    n_pp = spec.pp_body.shape[0]
    cmax = n_gp + n_pp
    rows_n = np.zeros((cmax, n))
    rows_t = np.zeros((cmax, n))
    wrn = np.zeros((cmax, n))
    wrt = np.zeros((cmax, n))
    dn = np.zeros(cmax)
    dt_ = np.zeros(cmax)
    tgt = np.zeros(cmax)
    c_body = np.zeros(cmax, dtype=np.int64)
    c_other = np.zeros(cmax, dtype=np.int64)
    nc = 0
    ground = spec.phys[1]
    beta = spec.phys[4]
    slop = spec.phys[5]
    jx = np.zeros(n)
    jy = np.zeros(n)
    jx2 = np.zeros(n)
    jy2 = np.zeros(n)
    geo = np.zeros(5)
    for i in range(n_gp + n_pp):
        if i < n_gp:
            b = spec.gp_body[i]
            lx = spec.gp_local[i, 0]
            ly = spec.gp_local[i, 1]
            r = spec.gp_radius[i]
        else:
            b = spec.pp_body[i - n_gp]
            lx = spec.pp_local[i - n_gp, 0]
            ly = spec.pp_local[i - n_gp, 1]
            r = spec.pp_radius[i - n_gp]
        ca = np.cos(angle[b])
        sa = np.sin(angle[b])
        px = origin[b, 0] + ca * lx - sa * ly
        py = origin[b, 1] + sa * lx + ca * ly
        other = -1
        if i < n_gp:
            depth = ground - (py - r)
            nx = 0.0
            ny = 1.0
            cx = px
            cy = ground
        else:
            other = spec.pp_shape[i - n_gp]
            if spec.shape_kind[other] == 1:
                _box_contact(spec, other, angle, com, px, py, r, geo)
            else:
                _capsule_contact(spec, other, angle, origin, px, py, r, geo)
            depth = geo[0]
            nx = geo[1]
            ny = geo[2]
            cx = geo[3]
            cy = geo[4]
        if depth <= -CONTACT_GAP:
            continue
        jx[:] = 0.0
        jy[:] = 0.0
        point_jacobian(spec, b, cx, cy, origin, dcom, jx, jy)
        if other >= 0:
            jx2[:] = 0.0
            jy2[:] = 0.0
            point_jacobian(spec, other, cx, cy, origin, dcom, jx2, jy2)
            jx -= jx2
            jy -= jy2
        tx = -ny
        ty = nx
        for k in range(n):
            rows_n[nc, k] = nx * jx[k] + ny * jy[k]
            rows_t[nc, k] = tx * jx[k] + ty * jy[k]
        wrn[nc] = winv @ rows_n[nc]
        wrt[nc] = winv @ rows_t[nc]
        dn[nc] = rows_n[nc] @ wrn[nc] + 1e-12
        dt_[nc] = rows_t[nc] @ wrt[nc] + 1e-12
        if depth >= 0.0:
            tgt[nc] = beta * max(depth - slop, 0.0) / h
        else:
            tgt[nc] = depth / h
        c_body[nc] = b
        c_other[nc] = other
        nc += 1

    lam_n = np.zeros(nc)
    lam_t = np.zeros(nc)
    mu = spec.phys[2]
    for _ in range(spec.iphys[1]):
        for c in range(nc):
            vn = rows_n[c] @ u_new
            new = max(lam_n[c] + (tgt[c] - vn) / dn[c], 0.0)
            d = new - lam_n[c]
            lam_n[c] = new
            if d != 0.0:
                u_new += wrn[c] * d
            vt = rows_t[c] @ u_new
            lim = mu * lam_n[c]
            new = min(max(lam_t[c] - vt / dt_[c], -lim), lim)
            d = new - lam_t[c]
            lam_t[c] = new
            if d != 0.0:
                u_new += wrt[c] * d
    for c in range(nc):
        f = np.sqrt(lam_n[c] * lam_n[c] + lam_t[c] * lam_t[c]) / h * acc_scale
        b = c_body[c]
        o = c_other[c]
        # accumulated on the probe's body, per system it touched (last slot: ground)
        if o < 0:
            facc[b, n_sys] += f
        else:
            facc[b, spec.body_sys[o]] += f

    for k in range(n):
        u[k] = u_new[k]
        g[k] += h * u_new[k]


@njit(cache=True)
def step_batch(spec, G, U, T, facc, diverged):
    """One control tick (``iphys[0]`` substeps) for every env row."""
    n_env = G.shape[0]
    n_sub = spec.iphys[0]
    for e in range(n_env):
        facc[e, :, :] = 0.0
        if diverged[e]:
            continue
        for _ in range(n_sub):
            if not _healthy(G[e], U[e]):
                break
            substep(spec, G[e], U[e], T[e], facc[e], 1.0 / n_sub)
        if not _healthy(G[e], U[e]):
            diverged[e] = True


@njit(cache=True)
def _healthy(g, u):
    for k in range(g.shape[0]):
        if not (np.isfinite(g[k]) and np.isfinite(u[k])) or abs(u[k]) > 1e4:
            return False
    return True


@njit(cache=True)
def kinematics_batch(spec, G, U, angle, origin, com, omega, vcom):
    for e in range(G.shape[0]):
        body_velocities(spec, G[e], U[e], angle[e], origin[e], com[e], omega[e], vcom[e])


@njit(cache=True)
def root_to_com_batch(spec, sys_index, root_pos, root_angle, q, root_vel, root_omega, qd, G, U):
    """Fill COM-based coordinates of one system from root-based kinematic states."""
    n = G.shape[1]
    nb = spec.body_parent.shape[0]
    c0 = spec.sys_coord0[sys_index]
    nj = spec.sys_ncoord[sys_index] - 3
    rb = spec.sys_body0[sys_index]
    angle = np.zeros(nb)
    origin = np.zeros((nb, 2))
    com = np.zeros((nb, 2))
    dcom = np.zeros((n, 2))
    for e in range(G.shape[0]):
        g = G[e]
        g[c0] = 0.0
        g[c0 + 1] = 0.0
        g[c0 + 2] = root_angle[e]
        for j in range(nj):
            g[c0 + 3 + j] = q[e, j]
        forward_kinematics(spec, g, angle, origin, com)
        # origin[rb] is now the root position relative to the COM
        g[c0] = root_pos[e, 0] - origin[rb, 0]
        g[c0 + 1] = root_pos[e, 1] - origin[rb, 1]
        forward_kinematics(spec, g, angle, origin, com)
        com_jacobian_shift(spec, origin, com, dcom)
        u = U[e]
        u[c0 + 2] = root_omega[e]
        for j in range(nj):
            u[c0 + 3 + j] = qd[e, j]
        vx = root_vel[e, 0]
        vy = root_vel[e, 1]
        for k in range(c0 + 2, c0 + 3 + nj):
            vx += dcom[k, 0] * u[k]
            vy += dcom[k, 1] * u[k]
        u[c0] = vx
        u[c0 + 1] = vy

"""Closed-loop vector field and fixed-step RK4 integration.

Every function here is compiled with numba unless ``PIDPBC_DISABLE_NUMBA``
is set, in which case the identical source runs as plain Python. The inner
routines are written as explicit loops over preallocated work arrays: the
systems are tiny (n <= 10, m <= 2), so temporaries would dominate the cost.
See :func:`pidpbc.controllers.kernel_args` for how parameters are packed.

Map kinds: 0 = no map (linear loop solve), 1 = identity map routed through
the nonlinear solver, 2 = saturating tanh map.
"""
import math

import numpy as np

from ._jit import njit

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 100

STATUS_OK = 0
STATUS_NO_CONVERGENCE = 1
STATUS_DIVERGED = 2
STATUS_SINGULAR = 3


@njit(cache=True)
def _w(kind, s, lam, u0, a, c, lo, hi):
    if kind != 2:
        return s
    w = a * math.tanh(lam * s - u0) + c
    # keep the output strictly inside the bounds when tanh rounds to +-1
    return min(max(w, lo), hi)


@njit(cache=True)
def _dw(kind, s, lam, u0, a):
    if kind != 2:
        return 1.0
    z = abs(lam * s - u0)
    if z > 350.0:
        return 0.0
    ch = math.cosh(z)
    return a * lam / (ch * ch)


@njit(cache=True)
def map_eval(kind, s, lam, u0, a, c, lo, hi):
    out = np.empty(s.size)
    for i in range(s.size):
        out[i] = _w(kind, s[i], lam[i], u0[i], a[i], c[i], lo[i], hi[i])
    return out


@njit(cache=True)
def map_slope(kind, s, lam, u0, a):
    out = np.empty(s.size)
    for i in range(s.size):
        out[i] = _dw(kind, s[i], lam[i], u0[i], a[i])
    return out


@njit(cache=True, inline="always")
def _solve(A, b, out, M):
    """Gaussian elimination with partial pivoting; ``M`` is scratch."""
    m = b.size
    for i in range(m):
        out[i] = b[i]
        for j in range(m):
            M[i, j] = A[i, j]
    for k in range(m):
        p = k
        best = abs(M[k, k])
        for i in range(k + 1, m):
            if abs(M[i, k]) > best:
                best = abs(M[i, k])
                p = i
        if best == 0.0 or not math.isfinite(best):
            return False
        if p != k:
            for j in range(m):
                M[k, j], M[p, j] = M[p, j], M[k, j]
            out[k], out[p] = out[p], out[k]
        for i in range(k + 1, m):
            f = M[i, k] / M[k, k]
            for j in range(k, m):
                M[i, j] -= f * M[k, j]
            out[i] -= f * out[k]
    for i in range(m - 1, -1, -1):
        s = out[i]
        for j in range(i + 1, m):
            s -= M[i, j] * out[j]
        out[i] = s / M[i, i]
    return True


@njit(cache=True)
def _loop_residual(loop, base, v, out, kind, lam, u0, a, c, lo, hi):
    m = base.size
    fn = 0.0
    for i in range(m):
        s = v[i] - base[i]
        for j in range(m):
            s += loop[i, j] * _w(kind, v[j], lam[j], u0[j], a[j], c[j], lo[j], hi[j])
        out[i] = s
        fn = max(fn, abs(s))
    return fn


@njit(cache=True)
def _solve_map_loop(loop, base, v0, v, kind, lam, u0, a, c, lo, hi, F, Jm, M, dv, vt, Ft):
    """Solve ``v + loop @ w(v) = base`` by Newton with backtracking; result in ``v``."""
    m = base.size
    scale = 1.0
    for i in range(m):
        v[i] = v0[i]
        scale = max(scale, 1.0 + abs(base[i]))
    fn = _loop_residual(loop, base, v, F, kind, lam, u0, a, c, lo, hi)
    for _ in range(NEWTON_MAXITER):
        if fn <= NEWTON_TOL * scale:
            return STATUS_OK
        for i in range(m):
            for j in range(m):
                Jm[i, j] = loop[i, j] * _dw(kind, v[j], lam[j], u0[j], a[j])
            Jm[i, i] += 1.0
            F[i] = -F[i]
        if not _solve(Jm, F, dv, M):
            return STATUS_SINGULAR
        t = 1.0
        fnn = fn
        while True:
            for i in range(m):
                vt[i] = v[i] + t * dv[i]
            fnn = _loop_residual(loop, base, vt, Ft, kind, lam, u0, a, c, lo, hi)
            if fnn < fn or t < 1e-12:
                break
            t *= 0.5
        for i in range(m):
            v[i] = vt[i]
            F[i] = Ft[i]
        fn = fnn
    if fn <= NEWTON_TOL * scale:
        return STATUS_OK
    return STATUS_NO_CONVERGENCE


@njit(cache=True)
def workspace(n, m):
    return (np.empty(n), np.empty((n, m)), np.empty(m), np.empty(m), np.empty(m),
            np.empty((m, m)), np.empty((m, m)), np.empty((m, m)),
            np.empty(m), np.empty(m), np.empty(m), np.empty(m), np.empty(m))


@njit(cache=True, inline="always")
def _field(x, xc, v0, P, ws, dx, dxc, u, v):
    """Vector field of plant + controller written into ``dx, dxc, u, v``.

    ``v`` is the map argument (equal to ``u`` without a map) and seeds the
    next solve. Returns a status code.
    """
    F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs, kind, lam, u0, a, c, lo, hi = P
    f, g, y, gf, base, Gg, loop, M, F, dv, vt, Ft, tmp = ws
    n = x.size
    m = xc.size
    for i in range(n):
        s = E[i]
        for j in range(n):
            s += F0[i, j] * x[j]
        f[i] = s
    for k in range(m):
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += JQ[k, i, j] * x[j]
            g[i, k] = s
    for k in range(m):
        sy = 0.0
        sf = 0.0
        for j in range(n):
            sy += GsTQ[k, j] * x[j]
            sf += GsTQ[k, j] * f[j]
        y[k] = sy
        gf[k] = sf
        for l in range(m):
            s = 0.0
            for j in range(n):
                s += GsTQ[k, j] * g[j, l]
            Gg[k, l] = s
    for i in range(m):
        s = 0.0
        for k in range(m):
            s += -KP[i, k] * y[k] + KI[i, k] * xc[k] - KD[i, k] * gf[k]
        base[i] = s
        for l in range(m):
            s = 0.0
            for k in range(m):
                s += KD[i, k] * Gg[k, l]
            loop[i, l] = s
    status = STATUS_OK
    if kind == 0:
        for i in range(m):
            loop[i, i] += 1.0
        if not _solve(loop, base, u, M):
            return STATUS_SINGULAR
        for i in range(m):
            v[i] = u[i]
    else:
        status = _solve_map_loop(loop, base, v0, v, kind, lam, u0, a, c, lo, hi, F, Gg, M, dv, vt, Ft)
        for i in range(m):
            u[i] = _w(kind, v[i], lam[i], u0[i], a[i], c[i], lo[i], hi[i])
    for i in range(n):
        s = f[i]
        for k in range(m):
            s += g[i, k] * u[k]
        dx[i] = s
    if kind == 0:
        for i in range(m):
            tmp[i] = xc[i] - xcs[i]
        for i in range(m):
            s = -y[i]
            for k in range(m):
                s -= KLKI[i, k] * tmp[k]
            dxc[i] = s
    else:
        for i in range(m):
            s = 0.0
            for k in range(m):
                s += KI[i, k] * xc[k]
            tmp[i] = _w(kind, s, lam[i], u0[i], a[i], c[i], lo[i], hi[i]) - wcs[i]
        for i in range(m):
            s = -y[i]
            for k in range(m):
                s -= KL[i, k] * tmp[k]
            dxc[i] = s
    return status


@njit(cache=True, inline="always")
def _rk4(x, xc, v, dt, P, ws, rk, xn, xcn, u, vnext):
    """Classical RK4 written as a loop over stages so the field is inlined once."""
    kx, kc, ax, ac, xt, xct, ut, va, vb = rk
    n = x.size
    m = xc.size
    for i in range(n):
        xt[i] = x[i]
        ax[i] = 0.0
    for i in range(m):
        xct[i] = xc[i]
        va[i] = v[i]
        ac[i] = 0.0
    status = STATUS_OK
    for stage in range(4):
        st = _field(xt, xct, va, P, ws, kx, kc, ut, vb)
        status = max(status, st)
        if stage == 0:
            for i in range(m):
                u[i] = ut[i]
                vnext[i] = vb[i]
        wgt = 1.0 if stage == 0 or stage == 3 else 2.0
        h = dt if stage == 2 else 0.5 * dt
        for i in range(n):
            ax[i] += wgt * kx[i]
            xt[i] = x[i] + h * kx[i]
        for i in range(m):
            ac[i] += wgt * kc[i]
            xct[i] = xc[i] + h * kc[i]
            va[i] = vb[i]
    w6 = dt / 6.0
    for i in range(n):
        xn[i] = x[i] + w6 * ax[i]
    for i in range(m):
        xcn[i] = xc[i] + w6 * ac[i]
    return status


@njit(cache=True)
def _rk_workspace(n, m):
    return (np.empty(n), np.empty(m), np.empty(n), np.empty(m), np.empty(n),
            np.empty(m), np.empty(m), np.empty(m), np.empty(m))


@njit(cache=True)
def closed_loop(x, xc, v0, F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs,
                kind, lam, u0, a, c, lo, hi):
    """Returns ``(dx, dxc, u, v, status)`` at ``(x, xc)``."""
    P = (F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs, kind, lam, u0, a, c, lo, hi)
    n = x.size
    m = xc.size
    dx = np.empty(n)
    dxc = np.empty(m)
    u = np.empty(m)
    v = np.empty(m)
    st = _field(x, xc, v0, P, workspace(n, m), dx, dxc, u, v)
    return dx, dxc, u, v, st


@njit(cache=True)
def rk4_step(x, xc, v, dt, F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs,
             kind, lam, u0, a, c, lo, hi):
    """One classical RK4 step; the loop is re-solved at every stage.

    Returns ``(x_next, xc_next, u, v_next, status)`` with ``u`` the control
    at the start of the step.
    """
    P = (F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs, kind, lam, u0, a, c, lo, hi)
    n = x.size
    m = xc.size
    xn = np.empty(n)
    xcn = np.empty(m)
    u = np.empty(m)
    vn = np.empty(m)
    st = _rk4(x, xc, v, dt, P, workspace(n, m), _rk_workspace(n, m), xn, xcn, u, vn)
    return xn, xcn, u, vn, st


@njit(cache=True)
def integrate(x0, xc0, v0, nsteps, dt, decimate, offset, guard,
              F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs,
              kind, lam, u0, a, c, lo, hi):
    """Integrate ``nsteps`` steps, sampling whenever ``(offset + k) % decimate == 0``.

    Samples hold the state at the start of a step and the control emitted
    over it. ``guard`` bounds ``||x||``; crossing it or producing a
    non-finite value stops the run with ``STATUS_DIVERGED``.
    Returns ``(X, XC, U, Y, x, xc, v, status, steps_done)``.
    """
    P = (F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs, kind, lam, u0, a, c, lo, hi)
    n = x0.size
    m = xc0.size
    first = (decimate - offset % decimate) % decimate
    nsamp = 0
    if first < nsteps:
        nsamp = (nsteps - 1 - first) // decimate + 1
    X = np.empty((nsamp, n))
    XC = np.empty((nsamp, m))
    U = np.empty((nsamp, m))
    Y = np.empty((nsamp, m))
    ws = workspace(n, m)
    rk = _rk_workspace(n, m)
    x = x0.copy()
    xc = xc0.copy()
    v = v0.copy()
    xn = np.empty(n)
    xcn = np.empty(m)
    u = np.empty(m)
    vn = np.empty(m)
    j = 0
    status = STATUS_OK
    k = 0
    while k < nsteps:
        st = _rk4(x, xc, v, dt, P, ws, rk, xn, xcn, u, vn)
        if (offset + k) % decimate == 0:
            for i in range(n):
                X[j, i] = x[i]
            for i in range(m):
                XC[j, i] = xc[i]
                U[j, i] = u[i]
                s = 0.0
                for l in range(n):
                    s += GsTQ[i, l] * x[l]
                Y[j, i] = s
            j += 1
        if st != STATUS_OK:
            status = st
            break
        k += 1
        nrm = 0.0
        bad = False
        for i in range(n):
            if not math.isfinite(xn[i]):
                bad = True
            nrm += xn[i] * xn[i]
        for i in range(m):
            if not math.isfinite(xcn[i]):
                bad = True
        if bad or math.sqrt(nrm) > guard:
            status = STATUS_DIVERGED
            break
        for i in range(n):
            x[i] = xn[i]
        for i in range(m):
            xc[i] = xcn[i]
            v[i] = vn[i]
    return X[:j], XC[:j], U[:j], Y[:j], x, xc, v, status, k


# -- stiff path: fixed-step L-stable SDIRK2 ---------------------------------
#
# The stiffness sits in the feedback loop: with the control frozen the plant
# is mild, but the loop gain through a saturating map is so large that its
# linear region is a thin layer in state space, and Newton on the full state
# bounces across it. Each stage is therefore solved in the map arguments
# ``p = (v, r)``, with ``r = K_I x_c`` feeding the leakage map: for frozen
# ``p`` the stage equation is linear in the state, and the remaining m (or
# 2m) equations are strongly monotone.

SDIRK_GAMMA = 1.0 - math.sqrt(0.5)
SDIRK_TOL = 1e-12
SDIRK_STALL_TOL = 1e-9
SDIRK_MAXITER = 50
SDIRK_BACKTRACK = 40
SDIRK_MAX_HALVINGS = 24


@njit(cache=True)
def _stiff_workspace(n, m):
    q = 2 * m
    return (np.empty((n, n)), np.empty((n, n)), np.empty((n, n)), np.empty(n), np.empty(n),
            np.empty((m, m)), np.empty((m, m)), np.empty(m), np.empty(m), np.empty(m),
            np.empty(q), np.empty(q), np.empty(q), np.empty(q), np.empty((q, q)),
            np.empty((q, q)), np.empty(q), np.empty(q), np.empty(n + m), np.empty(n + m))


@njit(cache=True)
def _stage_state(p, base, gh, P, sw, Y, Fy, R):
    """Solve the stage equation for ``Y`` with the map arguments frozen at
    ``p``; ``Fy`` receives the field at ``Y`` and ``R`` the argument residual."""
    F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs, kind, lam, u0, a, c, lo, hi = P
    B, A, Ms, rhs, xs, Am, Mm, u, yv, bc = sw[:10]
    n = F0.shape[0]
    m = KP.shape[0]
    for k in range(m):
        u[k] = _w(kind, p[k], lam[k], u0[k], a[k], c[k], lo[k], hi[k])
    for i in range(n):
        for j in range(n):
            s = F0[i, j]
            for k in range(m):
                s += JQ[k, i, j] * u[k]
            B[i, j] = s
            A[i, j] = -gh * s
        A[i, i] += 1.0
        rhs[i] = base[i] + gh * E[i]
    if not _solve(A, rhs, xs, Ms):
        return False
    for i in range(n):
        Y[i] = xs[i]
        s = E[i]
        for j in range(n):
            s += B[i, j] * xs[j]
        Fy[i] = s
    for k in range(m):
        s = 0.0
        for j in range(n):
            s += GsTQ[k, j] * xs[j]
        yv[k] = s
    if kind == 2:
        for i in range(m):
            s = -yv[i]
            for k in range(m):
                s -= KL[i, k] * (_w(kind, p[m + k], lam[k], u0[k], a[k], c[k], lo[k], hi[k]) - wcs[k])
            Fy[n + i] = s
            Y[n + i] = base[n + i] + gh * s
    else:
        # linear leakage: (I + gh KLKI) x_c = base_c - gh (y - KLKI x_c*)
        for i in range(m):
            s = base[n + i] - gh * yv[i]
            for k in range(m):
                s += gh * KLKI[i, k] * xcs[k]
                Am[i, k] = gh * KLKI[i, k]
            Am[i, i] += 1.0
            bc[i] = s
        if not _solve(Am, bc, Y[n:], Mm):
            return False
        for i in range(m):
            s = -yv[i]
            for k in range(m):
                s -= KLKI[i, k] * (Y[n + k] - xcs[k])
            Fy[n + i] = s
    # argument residuals: v - s(Y, u) and r - K_I x_c
    for i in range(m):
        s = 0.0
        for k in range(m):
            gd = 0.0
            gy = 0.0
            for j in range(n):
                gd += GsTQ[k, j] * Fy[j]
                gy += GsTQ[k, j] * Y[j]
            s += -KP[i, k] * gy + KI[i, k] * Y[n + k] - KD[i, k] * gd
        R[i] = p[i] - s
        s = 0.0
        for k in range(m):
            s += KI[i, k] * Y[n + k]
        R[m + i] = p[m + i] - s
    return True


@njit(cache=True)
def _stage(base, gh, p, P, sw, Y, Fy):
    """Newton with backtracking on the argument residual; ``p``, ``Y``, ``Fy`` in place."""
    m = p.size // 2
    q = 2 * m if P[11] == 2 else m
    R, Rt, pt, dp, Jm, Mq, negR, Rc = sw[10:18]
    Yt, Ft = sw[18], sw[19]
    if not _stage_state(p, base, gh, P, sw, Y, Fy, R):
        return STATUS_SINGULAR
    if q == m:
        # r only feeds a nonlinear leakage map; keep it consistent
        for i in range(m):
            p[m + i] -= R[m + i]
            R[m + i] = 0.0
    for _ in range(SDIRK_MAXITER):
        fn = 0.0
        pn = 1.0
        for i in range(q):
            fn = max(fn, abs(R[i]))
            pn = max(pn, 1.0 + abs(p[i]))
        if fn <= SDIRK_TOL * pn:
            return STATUS_OK
        for j in range(q):
            for i in range(2 * m):
                pt[i] = p[i]
            d = 1e-7 * (1.0 + abs(p[j]))
            pt[j] += d
            if not _stage_state(pt, base, gh, P, sw, Yt, Ft, Rc):
                return STATUS_SINGULAR
            for i in range(q):
                Jm[i, j] = (Rc[i] - R[i]) / d
        for i in range(q):
            negR[i] = -R[i]
        if not _solve(Jm[:q, :q], negR[:q], dp[:q], Mq[:q, :q]):
            return STATUS_SINGULAR
        t = 1.0
        accepted = False
        for _ in range(SDIRK_BACKTRACK):
            for i in range(2 * m):
                pt[i] = p[i]
            for i in range(q):
                pt[i] += t * dp[i]
            if _stage_state(pt, base, gh, P, sw, Yt, Ft, Rt):
                if q == m:
                    for i in range(m):
                        pt[m + i] -= Rt[m + i]
                        Rt[m + i] = 0.0
                fnn = 0.0
                for i in range(q):
                    fnn = max(fnn, abs(Rt[i]))
                if fnn < fn:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            if fn <= SDIRK_STALL_TOL * pn:
                return STATUS_OK
            return STATUS_NO_CONVERGENCE
        for i in range(2 * m):
            p[i] = pt[i]
            R[i] = Rt[i]
        for i in range(Y.size):
            Y[i] = Yt[i]
            Fy[i] = Ft[i]
    return STATUS_NO_CONVERGENCE


@njit(cache=True)
def _sdirk2_single(z, v, dt, n, P, ws, sw, u, vnext):
    """One SDIRK2 step of length ``dt``; ``u`` and ``vnext`` get the control at
    ``z`` and the loop argument at the new state."""
    N = z.size
    m = v.size
    gam = SDIRK_GAMMA
    gh = gam * dt
    F0 = np.empty(N)
    va = np.empty(m)
    st = _field(z[:n], z[n:], v, P, ws, F0[:n], F0[n:], u, va)
    if st != STATUS_OK:
        return z.copy(), st
    KI = P[5]
    p = np.empty(2 * m)
    for i in range(m):
        p[i] = va[i]
        s = 0.0
        for k in range(m):
            s += KI[i, k] * z[n + k]
        p[m + i] = s
    Y1 = np.empty(N)
    F1 = np.empty(N)
    st = _stage(z, gh, p, P, sw, Y1, F1)
    if st != STATUS_OK:
        return Y1, st
    base = z + (1.0 - gam) * dt * F1
    Y2 = np.empty(N)
    F2 = np.empty(N)
    st = _stage(base, gh, p, P, sw, Y2, F2)
    for i in range(m):
        vnext[i] = p[i]
    return Y2, st


@njit(cache=True)
def _sdirk2(z, v, dt, n, P, ws, sw, u, vnext):
    """One step of the two-stage stiffly accurate SDIRK method.

    When a stage does not converge the step is covered by substeps whose
    length is halved on failure and doubled again after success, down to
    ``dt / 2**SDIRK_MAX_HALVINGS``. ``u`` receives the control at the step
    start.
    """
    zn, st = _sdirk2_single(z, v, dt, n, P, ws, sw, u, vnext)
    if st != STATUS_NO_CONVERGENCE:
        return zn, st
    m = v.size
    ut = np.empty(m)
    vt = np.empty(m)
    zc = z.copy()
    vc = v.copy()
    total = 1 << SDIRK_MAX_HALVINGS
    pos = 0
    lev = 1
    while pos < total:
        size = total >> lev
        zt, st = _sdirk2_single(zc, vc, dt * size / total, n, P, ws, sw, ut, vt)
        if st == STATUS_OK:
            zc = zt
            vc[:] = vt
            pos += size
            if lev > 0 and pos % (2 * size) == 0:
                lev -= 1
        elif st == STATUS_NO_CONVERGENCE and lev < SDIRK_MAX_HALVINGS:
            lev += 1
        else:
            return zt, st
    vnext[:] = vc
    return zc, STATUS_OK


@njit(cache=True)
def integrate_stiff(x0, xc0, v0, nsteps, dt, decimate, offset, guard,
                    F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs,
                    kind, lam, u0, a, c, lo, hi):
    """Same contract as :func:`integrate` with the L-stable SDIRK2 step."""
    P = (F0, JQ, E, GsTQ, KP, KI, KD, KL, KLKI, xcs, wcs, kind, lam, u0, a, c, lo, hi)
    n = x0.size
    m = xc0.size
    first = (decimate - offset % decimate) % decimate
    nsamp = 0
    if first < nsteps:
        nsamp = (nsteps - 1 - first) // decimate + 1
    X = np.empty((nsamp, n))
    XC = np.empty((nsamp, m))
    U = np.empty((nsamp, m))
    Y = np.empty((nsamp, m))
    ws = workspace(n, m)
    sw = _stiff_workspace(n, m)
    z = np.concatenate((x0, xc0))
    v = v0.copy()
    u = np.empty(m)
    vn = np.empty(m)
    j = 0
    status = STATUS_OK
    k = 0
    while k < nsteps:
        zn, st = _sdirk2(z, v, dt, n, P, ws, sw, u, vn)
        if (offset + k) % decimate == 0:
            X[j] = z[:n]
            XC[j] = z[n:]
            U[j] = u
            Y[j] = GsTQ @ z[:n]
            j += 1
        if st != STATUS_OK:
            status = st
            break
        k += 1
        if not np.all(np.isfinite(zn)) or math.sqrt(np.sum(zn[:n] * zn[:n])) > guard:
            status = STATUS_DIVERGED
            break
        z = zn
        v[:] = vn
    return X[:j], XC[:j], U[:j], Y[:j], z[:n].copy(), z[n:].copy(), v, status, k

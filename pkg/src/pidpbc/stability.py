"""Stability certificates and Lyapunov functions for the PID-PBC family.

All certificates work in the coordinates ``z = (Q (x - x_bar), K_I (x_c - x_c_bar))``
where the Lyapunov functions are quadratic forms ``z' Qm z / 2`` and their
derivatives are ``-z' Dm z``. A condition counts as satisfied when the
smallest eigenvalue exceeds ``PD_RTOL`` times the largest magnitude.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .controllers import ControllerConfig, evaluate
from .equilibria import equilibrium_control, is_assignable
from .phs import PHSystem, input_matrix

PD_RTOL = 1e-12
EPS_GRID = np.logspace(-9.0, 0.0, 40)
GOLDEN_ITERS = 60
M2_FLOOR = 1e-12


@dataclass(frozen=True)
class Condition:
    name: str
    statement: str
    margin: float
    scale: float
    # smallest eigenvalue after symmetric diagonal scaling; decides definiteness
    # when the raw spectrum spans many decades
    scaled_margin: float | None = None

    @property
    def holds(self) -> bool:
        if self.scaled_margin is not None:
            return self.scaled_margin > PD_RTOL
        return self.margin > PD_RTOL * self.scale


@dataclass(frozen=True)
class StabilityCertificate:
    variant: str
    satisfied: bool
    conditions: tuple[Condition, ...]
    epsilon: float = 0.0
    alpha: float = 0.0
    failure: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def margins(self) -> list[tuple[str, float]]:
        return [(c.name, c.margin) for c in self.conditions]


def _sym(M):
    return 0.5 * (M + M.T)


def _eig_range(M) -> tuple[float, float]:
    ev = np.linalg.eigvalsh(_sym(M))
    return float(ev[0]), float(np.abs(ev).max())


def _scaled_min_eig(M) -> float:
    """Smallest eigenvalue of D M D with D = diag(M)^-1/2 (same inertia as M)."""
    S = _sym(M)
    d = np.diag(S)
    if d.min() <= 0.0:
        return float(d.min() / max(np.abs(d).max(), np.finfo(float).tiny))
    s = 1.0 / np.sqrt(d)
    return float(np.linalg.eigvalsh(S * np.outer(s, s))[0])


def _condition(name, statement, M) -> Condition:
    lo, scale = _eig_range(M)
    return Condition(name, statement, lo, scale, _scaled_min_eig(M))


def _box_vertices(u_box):
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in u_box)
    return [np.array(v) for v in itertools.product(*zip(lo, hi))]


def equilibrium_integrator(sys: PHSystem, cfg: ControllerConfig, x_bar) -> np.ndarray:
    """Integrator state consistent with a steady state ``x_bar`` of ``sys``.

    At rest the derivative action vanishes so ``K_I x_c = v + K_P y`` with
    ``y = g(x*)'Q x_bar`` and ``v`` the map argument producing ``u(x_bar)``.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = equilibrium_control(sys, x_bar)
    y = input_matrix(sys, cfg.x_star).T @ sys.Q @ x_bar
    v = cfg.monotone.inverse(u_bar) if cfg.monotone is not None else u_bar
    return np.linalg.solve(cfg.K_I, v + cfg.K_P @ y)


# -- PID-PBC ----------------------------------------------------------------

def _pid_blocks(sys, cfg, x_bar):
    g = input_matrix(sys, x_bar)
    Q = sys.Q
    A = _sym(Q + Q @ g @ cfg.K_D @ g.T @ Q)
    B = _sym(Q @ np.linalg.solve(A, Q))
    Qinv = np.linalg.inv(Q)
    return g, B, Qinv


def _pid_matrices(sys, cfg, g, B, Qinv, eps, u):
    b = sys.J0 + np.tensordot(u, sys.Js, axes=1) - sys.R - g @ cfg.K_P @ g.T
    Qe = np.block([[Qinv + g @ cfg.K_D @ g.T, -eps * g],
                   [-eps * g.T, np.linalg.inv(cfg.K_I)]])
    cross = 0.5 * eps * b.T @ B @ g
    De = np.block([[sys.R + g @ (cfg.K_P - eps * cfg.K_I) @ g.T, cross],
                   [cross.T, eps * g.T @ B @ g]])
    return _sym(Qe), _sym(De)


def _pid_rate(sys, cfg, g, B, Qinv, eps, vertices):
    worst = math.inf
    Qe = None
    for u in vertices:
        Qe, De = _pid_matrices(sys, cfg, g, B, Qinv, eps, u)
        worst = min(worst, np.linalg.eigvalsh(De)[0])
    qev = np.linalg.eigvalsh(Qe)
    if qev[0] <= 0.0:
        return -math.inf, worst, qev[0]
    return 2.0 * worst / qev[-1], worst, qev[0]


def pid_certificate(sys: PHSystem, cfg: ControllerConfig, x_bar, u_box) -> StabilityCertificate:
    """Exponential-stability certificate of the PID-PBC around ``x_bar``.

    The cross-term weight ``eps`` is searched on a log grid and refined by
    golden section on ``log eps``. The dissipation block is checked at every
    vertex of ``u_box``; its smallest eigenvalue is concave in ``u`` so the
    vertices are the worst case.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    if not is_assignable(sys, x_bar):
        raise ValueError("x_bar is not an assignable equilibrium of sys")
    g, B, Qinv = _pid_blocks(sys, cfg, x_bar)
    vertices = _box_vertices(u_box)

    def rate(le):
        return _pid_rate(sys, cfg, g, B, Qinv, 10.0 ** le, vertices)[0]

    logs = np.log10(EPS_GRID)
    rates = np.array([rate(le) for le in logs])
    k = int(np.argmax(rates))
    lo, hi = logs[max(k - 1, 0)], logs[min(k + 1, len(logs) - 1)]
    phi = 0.5 * (math.sqrt(5.0) - 1.0)
    a, b = hi - phi * (hi - lo), lo + phi * (hi - lo)
    fa, fb = rate(a), rate(b)
    for _ in range(GOLDEN_ITERS):
        if fa > fb:
            hi, b, fb = b, a, fa
            a = hi - phi * (hi - lo)
            fa = rate(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + phi * (hi - lo)
            fb = rate(b)
    cands = [(rates[k], logs[k]), (fa, a), (fb, b)]
    best_rate, best_log = max(cands)
    eps = 10.0 ** best_log
    Qe, _ = _pid_matrices(sys, cfg, g, B, Qinv, eps, vertices[0])
    worst = min(vertices, key=lambda u: np.linalg.eigvalsh(_pid_matrices(sys, cfg, g, B, Qinv, eps, u)[1])[0])
    _, De = _pid_matrices(sys, cfg, g, B, Qinv, eps, worst)
    conds = (
        _condition("Q_eps", "energy weight [Q^-1 + g K_D g', -eps g; -eps g', K_I^-1] > 0", Qe),
        _condition("D_eps", "dissipation weight at the worst input-box vertex > 0", De),
    )
    ok = all(c.holds for c in conds)
    alpha = max(best_rate, 0.0) if ok else 0.0
    return StabilityCertificate("pid", ok, conds, eps, alpha,
                                None if ok else "no cross-term weight gives a strict decrease",
                                {"worst_vertex": worst})


# -- PLID-PBC ---------------------------------------------------------------

def _sym_pair(g1, K, g2):
    return 0.5 * (g1 @ K @ g2.T + g2 @ K @ g1.T)


def plid_certificate(sys: PHSystem, cfg: ControllerConfig, x_bar, x_star=None) -> StabilityCertificate:
    """Stability conditions of the leaky PID-PBC at a closed-loop equilibrium ``x_bar``.

    ``alpha`` is the rate ``2 lmin(D)/lmax(Q)`` of the quadratic function
    ``(Q^-1 + K_D_sym, K_I^-1)`` with the full dissipation matrix, cross term
    included.
    """
    if cfg.K_L is None:
        raise ValueError("controller has no leakage")
    x_bar = np.asarray(x_bar, dtype=float)
    x_star = cfg.x_star if x_star is None else np.asarray(x_star, dtype=float)
    gb = input_matrix(sys, x_bar)
    gs = input_matrix(sys, x_star)
    KPs = _sym_pair(gb, cfg.K_P, gs)
    KDs = _sym_pair(gb, cfg.K_D, gs)
    RK = _sym(sys.R + KPs)
    dg = gs - gb
    c1 = _condition("R+K_P_sym", "R + K_P_sym > 0", RK)
    c2 = _condition("Q^-1+K_D_sym", "Q^-1 + K_D_sym > 0", np.linalg.inv(sys.Q) + KDs)
    conds = [c1, c2]
    if c1.margin > 0:
        c3 = _condition("leakage", "K_L > dg' (R + K_P_sym)^-1 dg / 4, dg = g(x*) - g(x_bar)",
                        cfg.K_L - 0.25 * dg.T @ np.linalg.solve(RK, dg))
    else:
        c3 = Condition("leakage", "K_L > dg' (R + K_P_sym)^-1 dg / 4, dg = g(x*) - g(x_bar)", -math.inf, 1.0)
    conds.append(c3)
    ok = all(c.holds for c in conds)
    Qm = _sym(np.block([[np.linalg.inv(sys.Q) + KDs, np.zeros_like(gb)],
                        [np.zeros_like(gb.T), np.linalg.inv(cfg.K_I)]]))
    Dm = _sym(np.block([[RK, 0.5 * dg], [0.5 * dg.T, cfg.K_L]]))
    alpha = 2.0 * np.linalg.eigvalsh(Dm)[0] / np.linalg.eigvalsh(Qm)[-1] if ok else 0.0
    return StabilityCertificate("plid", ok, tuple(conds), 0.0, max(float(alpha), 0.0),
                                None if ok else "leaky PID conditions violated")


# -- mPLID-PBC --------------------------------------------------------------

def mplid_certificate(sys: PHSystem, cfg: ControllerConfig, x_bar, x_star=None,
                      x_c_bar=None) -> StabilityCertificate:
    """Stability conditions of the saturated leaky PID-PBC.

    Map slopes are taken at the equilibrium arguments: ``M1`` at the control
    argument and ``M2`` at ``K_I x_c_bar``. A vanishing ``M2`` is reported as
    a distinct failure.
    """
    mp = cfg.monotone
    if mp is None:
        raise ValueError("controller has no monotone map")
    x_bar = np.asarray(x_bar, dtype=float)
    x_star = cfg.x_star if x_star is None else np.asarray(x_star, dtype=float)
    if x_c_bar is None:
        x_c_bar = equilibrium_integrator(sys, cfg, x_bar)
    x_c_bar = np.atleast_1d(np.asarray(x_c_bar, dtype=float))
    gb = input_matrix(sys, x_bar)
    gs = input_matrix(sys, x_star)
    v_bar = -cfg.K_P @ gs.T @ sys.Q @ x_bar + cfg.K_I @ x_c_bar
    M1 = mp.derivative(v_bar)
    M2 = mp.derivative(cfg.K_I @ x_c_bar)
    KL = cfg.leakage()
    KPb = 0.5 * (gb @ M1 @ cfg.K_P @ gs.T + gs @ cfg.K_P @ M1 @ gb.T)
    KDb = 0.5 * (gb @ M1 @ cfg.K_D @ gs.T + gs @ cfg.K_D @ M1 @ gb.T)
    RK = _sym(sys.R + KPb)
    cross = gs @ M2 - gb @ M1
    c1 = _condition("R+K_P_bar", "R + K_P_bar > 0", RK)
    c2 = _condition("Q^-1+K_D_bar", "Q^-1 + K_D_bar > 0", np.linalg.inv(sys.Q) + KDb)
    stmt = "M2 K_L M2 > c' (R + K_P_bar)^-1 c / 4, c = g(x*) M2 - g(x_bar) M1"
    if c1.margin > 0:
        c3 = _condition("leakage", stmt, M2 @ KL @ M2 - 0.25 * cross.T @ np.linalg.solve(RK, cross))
    else:
        c3 = Condition("leakage", stmt, -math.inf, 1.0)
    conds = (c1, c2, c3)
    slope_scale = float(np.max(mp.a * mp.lam)) if mp.kind == "tanh" else 1.0
    extra = {"M1": M1, "M2": M2, "x_c_bar": x_c_bar}
    if np.diag(M2).min() <= M2_FLOOR * slope_scale:
        return StabilityCertificate("mplid", False, conds, failure="not strongly monotone at the equilibrium",
                                    extra=extra)
    ok = all(c.holds for c in conds)
    return StabilityCertificate("mplid", ok, conds, failure=None if ok else "saturated leaky PID conditions violated",
                                extra=extra)


def certificate(sys: PHSystem, cfg: ControllerConfig, x_bar, u_box=None) -> StabilityCertificate:
    """Dispatch on the controller variant."""
    if cfg.variant == "pid":
        if u_box is None:
            raise ValueError("PID certificate needs an input box")
        return pid_certificate(sys, cfg, x_bar, u_box)
    if cfg.variant == "plid":
        return plid_certificate(sys, cfg, x_bar)
    return mplid_certificate(sys, cfg, x_bar)


def closed_loop_jacobian(sys: PHSystem, cfg: ControllerConfig, x, x_c) -> np.ndarray:
    """Exact Jacobian of the closed loop in ``(x, x_c)``.

    The loop ``v = -K_P y + K_I x_c - K_D g*'Q dx/dt`` is differentiated
    implicitly, so the result stays accurate however steep the map is.
    """
    x = np.asarray(x, dtype=float)
    x_c = np.atleast_1d(np.asarray(x_c, dtype=float))
    _, _, u, v = evaluate(cfg, sys, x, x_c)
    mp = cfg.monotone
    m = cfg.m
    M1 = mp.derivative(v) if mp is not None else np.eye(m)
    M2 = mp.derivative(cfg.K_I @ x_c) if mp is not None else np.eye(m)
    g = input_matrix(sys, x)
    GQ = input_matrix(sys, cfg.x_star).T @ sys.Q
    A = (sys.J0 + np.tensordot(u, sys.Js, axes=1) - sys.R) @ sys.Q
    lhs = np.eye(m) + cfg.K_D @ GQ @ g @ M1
    Vx = np.linalg.solve(lhs, -cfg.K_P @ GQ - cfg.K_D @ GQ @ A)
    Vc = np.linalg.solve(lhs, cfg.K_I)
    return np.block([[A + g @ M1 @ Vx, g @ M1 @ Vc],
                     [-GQ, -cfg.leakage() @ M2 @ cfg.K_I]])


def linearized_spectrum(sys: PHSystem, cfg: ControllerConfig, x_bar, x_c_bar) -> np.ndarray:
    """Eigenvalues of :func:`closed_loop_jacobian` at ``(x_bar, x_c_bar)``."""
    return np.linalg.eigvals(closed_loop_jacobian(sys, cfg, x_bar, x_c_bar))


# -- Lyapunov functions -----------------------------------------------------

def _logcosh(z):
    z = np.abs(z)
    return z + np.log1p(np.exp(-2.0 * z)) - math.log(2.0)


def monotone_energy_closed(cfg: ControllerConfig, x_c_bar, dx_c):
    """Closed form of the integral energy term for the tanh map (diagonal ``K_I``).

    ``dx_c`` of shape ``(m,)`` gives a float, ``(T, m)`` one value per row.
    """
    mp = cfg.monotone
    k = np.diag(cfg.K_I)
    xb = np.atleast_1d(x_c_bar)
    X = np.asarray(dx_c, dtype=float)
    lk = mp.lam * k
    z0 = lk * xb - mp.u0
    out = np.sum(mp.a / lk * _tanh_excess(z0, lk * X), axis=-1)
    return float(out) if X.ndim <= 1 else out


def _tanh_excess(z0, h):
    """``int_0^h [tanh(z0 + s) - tanh(z0)] ds`` without cancellation for small ``h``."""
    z0, h = np.broadcast_arrays(np.asarray(z0, dtype=float), np.asarray(h, dtype=float))
    t = np.tanh(z0)
    s2 = 1.0 - t * t
    ah = np.abs(h)
    with np.errstate(over="ignore", invalid="ignore"):
        far = _logcosh(z0 + h) - _logcosh(z0) - t * h
        mid = np.log1p(2.0 * np.sinh(0.5 * h) ** 2 + t * np.sinh(h)) - t * h
    near = s2 * h * h * (0.5 - t * h / 3.0 - (1.0 - 3.0 * t * t) * h * h / 12.0)
    return np.where(ah < 1e-4, near, np.where(ah <= 1.0, mid, far))


def monotone_energy(cfg: ControllerConfig, x_c_bar, dx_c) -> float:
    """``int_0^dx_c [w(K_I (x_c_bar + s)) - w(K_I x_c_bar)] ds`` by adaptive quadrature."""
    mp = cfg.monotone
    K = cfg.K_I
    if np.count_nonzero(K - np.diag(np.diag(K))):
        raise ValueError("integral energy term needs a diagonal K_I")
    k = np.diag(K)
    xb = np.atleast_1d(x_c_bar)
    X = np.atleast_1d(dx_c)
    total = 0.0
    for i in range(xb.size):
        sub = MonotoneChannel(mp, i)
        w0 = sub(k[i] * xb[i])
        tol = 1e-12 * max(abs(k[i] * X[i]) * max(abs(w0), 1.0), 1e-300)
        val, _ = integrate.quad(lambda s: sub(k[i] * (xb[i] + s)) - w0, 0.0, X[i],
                                epsabs=tol, epsrel=1e-12, limit=200)
        total += val
    return float(total)


class MonotoneChannel:
    """Scalar view of one channel of a monotone map."""

    def __init__(self, mp, i):
        self.mp = mp
        self.i = i

    def __call__(self, s: float) -> float:
        mp, i = self.mp, self.i
        if mp.kind != "tanh":
            return s
        lo, hi = mp.open_bounds
        w = mp.a[i] * math.tanh(mp.lam[i] * s - mp.u0[i]) + mp.c[i]
        return min(max(w, lo[i]), hi[i])


def lyapunov_value(variant: str, sys: PHSystem, cfg: ControllerConfig, x_bar, x_c_bar, x, x_c,
                   epsilon: float = 0.0, x_star=None) -> float:
    """Lyapunov function of the given variant at ``(x, x_c)``.

    ``pid`` uses the cross-term weight ``epsilon`` (``0`` gives the plain
    incremental energy); ``plid`` and ``mplid`` use the matching functions
    of the leaky and saturated controllers.
    """
    return float(lyapunov_series(variant, sys, cfg, x_bar, x_c_bar, np.atleast_2d(x),
                                 np.atleast_2d(x_c), epsilon, x_star, closed_form=False)[0])


def lyapunov_series(variant: str, sys: PHSystem, cfg: ControllerConfig, x_bar, x_c_bar, X, XC,
                    epsilon: float = 0.0, x_star=None, closed_form: bool = True) -> np.ndarray:
    """Vectorized :func:`lyapunov_value` over rows of ``X`` and ``XC``.

    For ``mplid`` the integral term uses the closed form when
    ``closed_form`` is true and quadrature otherwise.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    x_c_bar = np.atleast_1d(np.asarray(x_c_bar, dtype=float))
    x_star = cfg.x_star if x_star is None else np.asarray(x_star, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    XC = np.atleast_2d(np.asarray(XC, dtype=float))
    zx = (X - x_bar) @ sys.Q
    zc = (XC - x_c_bar) @ cfg.K_I
    gb = input_matrix(sys, x_bar)
    Qinv = np.linalg.inv(sys.Q)
    if variant == "pid":
        Wx = Qinv + gb @ cfg.K_D @ gb.T
        Wc = np.linalg.inv(cfg.K_I)
        return 0.5 * (np.einsum("ti,ij,tj->t", zx, Wx, zx) + np.einsum("ti,ij,tj->t", zc, Wc, zc)) \
            - epsilon * np.einsum("ti,ij,tj->t", zx, gb, zc)
    gs = input_matrix(sys, x_star)
    if variant == "plid":
        Wx = Qinv + _sym_pair(gb, cfg.K_D, gs)
        Wc = np.linalg.inv(cfg.K_I)
        return 0.5 * (np.einsum("ti,ij,tj->t", zx, Wx, zx) + np.einsum("ti,ij,tj->t", zc, Wc, zc))
    if variant == "mplid":
        v_bar = -cfg.K_P @ gs.T @ sys.Q @ x_bar + cfg.K_I @ x_c_bar
        M1 = cfg.monotone.derivative(v_bar)
        Wx = Qinv + 0.5 * (gb @ M1 @ cfg.K_D @ gs.T + gs @ cfg.K_D @ M1 @ gb.T)
        W1 = 0.5 * np.einsum("ti,ij,tj->t", zx, Wx, zx)
        dxc = XC - x_c_bar
        if closed_form and cfg.monotone.kind == "tanh":
            W2 = monotone_energy_closed(cfg, x_c_bar, dxc)
        else:
            W2 = np.array([monotone_energy(cfg, x_c_bar, d) for d in dxc])
        return W1 + W2
    raise ValueError(f"unknown variant {variant!r}")


# -- application bounds -----------------------------------------------------

def vsc_margin(params, x_star) -> float:
    """Tolerated underestimation of the far-end voltage, in volt.

    ``[R (i_d^2 + i_q^2) + G v1^2] / (gT v1)`` with ``gT`` the total line
    conductance. This is sufficient for ``gamma > 0``; see
    :func:`vsc_exact_margin` for the exact threshold.
    """
    z = params.coenergy(x_star)
    gT = float(np.sum(params.G_T))
    return float((params.R * (z[0] ** 2 + z[1] ** 2) + params.G * z[2] ** 2) / (gT * z[2]))


def vsc_exact_margin(params, x_star) -> float:
    """Underestimation ``V2_hat - V2`` at which ``gamma`` changes sign."""
    z = params.coenergy(x_star)
    gT = float(np.sum(params.G_T))
    return float((params.R * (z[0] ** 2 + z[1] ** 2) + (params.G + gT) * z[2] ** 2) / (gT * z[2]))


def boost_leakage_bound(params, x_star, x_bar) -> float:
    """Smallest leakage certifying the boost with ``K_P = K_D = 0``.

    ``[R di^2 + G_tot dv^2] / (4 R G_tot)`` where ``G_tot = G + G0``
    (actual load) and ``d`` is the reference minus the steady state.
    """
    zs = params.coenergy(x_star)
    zb = params.coenergy(x_bar)
    di, dv = zs - zb
    Gt = params.G + params.G0_actual
    return float((params.R * di**2 + Gt * dv**2) / (4.0 * params.R * Gt))


def boost_stability_condition(params, x_star) -> bool:
    """Whether the PID-PBC keeps a stable equilibrium under the actual load."""
    iL, vC = params.coenergy(x_star)
    lhs = (params.i0_actual - params.i0_hat) * vC + (params.G0_actual - params.G0_hat) * vC**2
    rhs = params.R * iL**2 + (params.G + params.G0_actual) * vC**2
    return bool(lhs < rhs)

"""PID-PBC, leaky PID-PBC and the monotone (saturating) variant.

The derivative action makes the control law implicit in ``u`` because
``dx/dt`` depends on ``u``. It is resolved exactly: a linear ``m x m``
solve without a map, a Newton solve of ``v + K_D g*'Q g(x) w(v) = c``
with one.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from . import kernels
from .equilibria import equilibrium_control
from .phs import PHSystem, input_matrix


class LoopSolveError(RuntimeError):
    """The algebraic loop of the derivative action could not be solved."""


def as_gain(K, m: int) -> np.ndarray:
    """Promote a scalar or vector gain to an ``m x m`` matrix."""
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        return K * np.eye(m)
    if K.ndim == 1:
        return np.diag(K)
    if K.shape != (m, m):
        raise ValueError(f"gain must be {m}x{m}")
    return K


def _check_sym(K, name, definite):
    if not np.allclose(K, K.T, rtol=1e-12, atol=0.0):
        raise ValueError(f"{name} must be symmetric")
    lmin = np.linalg.eigvalsh(K).min()
    tol = 1e-14 * max(np.abs(K).max(), 1e-300)
    if definite and lmin <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    if not definite and lmin < -tol:
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class MonotoneMap:
    """Componentwise ``w(s) = a tanh(lam s - u0) + c`` with ``w(u_star) = u_star``.

    ``a = (u_max - u_min)/2`` and ``c = (u_max + u_min)/2``. The offset
    ``u0`` is fixed at construction from ``u_star``. ``kind="identity"``
    gives ``w(s) = s`` (used to check reductions).
    """

    u_min: np.ndarray
    u_max: np.ndarray
    u_star: np.ndarray
    lam: np.ndarray
    kind: str = "tanh"

    def __post_init__(self):
        u_star = np.atleast_1d(np.asarray(self.u_star, dtype=float))
        shape = u_star.shape
        u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), shape).copy()
        u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), shape).copy()
        lam = np.broadcast_to(np.asarray(self.lam, dtype=float), shape).copy()
        if self.kind not in ("tanh", "identity"):
            raise ValueError("kind must be 'tanh' or 'identity'")
        if self.kind == "tanh":
            if np.any(lam <= 0):
                raise ValueError("steepness must be positive")
            if not (np.all(u_min < u_star) and np.all(u_star < u_max)):
                raise ValueError("nominal input must lie strictly inside the bounds")
        for name, val in (("u_min", u_min), ("u_max", u_max), ("u_star", u_star), ("lam", lam)):
            object.__setattr__(self, name, val)

    @classmethod
    def identity(cls, m: int) -> "MonotoneMap":
        return cls(np.full(m, -np.inf), np.full(m, np.inf), np.zeros(m), np.ones(m), kind="identity")

    @property
    def code(self) -> int:
        return 2 if self.kind == "tanh" else 1

    @property
    def a(self) -> np.ndarray:
        return 0.5 * (self.u_max - self.u_min) if self.kind == "tanh" else np.ones_like(self.u_star)

    @property
    def c(self) -> np.ndarray:
        return 0.5 * (self.u_max + self.u_min) if self.kind == "tanh" else np.zeros_like(self.u_star)

    @property
    def u0(self) -> np.ndarray:
        if self.kind != "tanh":
            return np.zeros_like(self.u_star)
        return self.lam * self.u_star - np.arctanh((2.0 * self.u_star - self.u_max - self.u_min)
                                                   / (self.u_max - self.u_min))

    @property
    def open_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Largest interval strictly inside ``(u_min, u_max)``."""
        return np.nextafter(self.u_min, self.u_max), np.nextafter(self.u_max, self.u_min)

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        lo, hi = self.open_bounds
        return kernels.map_eval(self.code, np.atleast_1d(s), self.lam, self.u0, self.a, self.c, lo, hi)

    def derivative(self, s) -> np.ndarray:
        """Diagonal Jacobian ``dw/ds``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.diag(kernels.map_slope(self.code, s, self.lam, self.u0, self.a))

    def inverse(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind != "tanh":
            return u.copy()
        return (np.arctanh((u - self.c) / self.a) + self.u0) / self.lam

    def eta(self, lo=None, hi=None) -> float:
        """Smallest slope over ``[lo, hi]`` (default: the output bounds).

        The slope is unimodal in each channel so the infimum sits at an end.
        """
        lo = self.u_min if lo is None else np.broadcast_to(lo, self.u_star.shape)
        hi = self.u_max if hi is None else np.broadcast_to(hi, self.u_star.shape)
        if self.kind != "tanh":
            return 1.0
        return float(min(np.diag(self.derivative(lo)).min(), np.diag(self.derivative(hi)).min()))

    def with_nominal(self, u_star) -> "MonotoneMap":
        return replace(self, u_star=u_star)


@dataclass(frozen=True)
class ControllerConfig:
    """Gains and references of a PID-PBC family controller.

    ``K_L = None`` gives the plain PID-PBC; a ``monotone`` map gives the
    saturating variants (mPID without leakage, mPLID with it).
    """

    K_P: np.ndarray
    K_I: np.ndarray
    K_D: np.ndarray
    x_star: np.ndarray
    x_c_star: np.ndarray
    K_L: np.ndarray | None = None
    monotone: MonotoneMap | None = None

    def __post_init__(self):
        m = np.atleast_1d(self.x_c_star).size
        K_P, K_I, K_D = (as_gain(K, m) for K in (self.K_P, self.K_I, self.K_D))
        _check_sym(K_I, "K_I", True)
        _check_sym(K_P, "K_P", False)
        _check_sym(K_D, "K_D", False)
        object.__setattr__(self, "K_P", K_P)
        object.__setattr__(self, "K_I", K_I)
        object.__setattr__(self, "K_D", K_D)
        if self.K_L is not None:
            K_L = as_gain(self.K_L, m)
            _check_sym(K_L, "K_L", False)
            object.__setattr__(self, "K_L", K_L)
        object.__setattr__(self, "x_star", np.asarray(self.x_star, dtype=float))
        object.__setattr__(self, "x_c_star", np.atleast_1d(np.asarray(self.x_c_star, dtype=float)))

    @classmethod
    def build(cls, sys_est: PHSystem, x_star, K_P, K_I, K_D=0.0, K_L=None, monotone=None):
        """Complete references from the estimated model.

        ``x_c_star = K_I^-1 u(x_star)``. ``monotone`` may be a map or a dict
        with ``u_min``, ``u_max`` and optionally ``lam``; its nominal input
        is set to ``u(x_star)``.
        """
        x_star = np.asarray(x_star, dtype=float)
        u_star = equilibrium_control(sys_est, x_star)
        K_I = as_gain(K_I, sys_est.m)
        x_c_star = np.linalg.solve(K_I, u_star)
        if isinstance(monotone, dict):
            monotone = MonotoneMap(monotone["u_min"], monotone["u_max"], u_star, monotone.get("lam", 10.0))
        elif monotone is not None and monotone.kind == "tanh":
            monotone = monotone.with_nominal(u_star)
        return cls(K_P, K_I, K_D, x_star, x_c_star, K_L, monotone)

    @property
    def variant(self) -> str:
        if self.monotone is not None:
            return "mplid"
        return "plid" if self.K_L is not None else "pid"

    @property
    def m(self) -> int:
        return self.x_c_star.size

    def leakage(self) -> np.ndarray:
        return self.K_L if self.K_L is not None else np.zeros((self.m, self.m))

    def with_reference(self, sys_est: PHSystem, x_star) -> "ControllerConfig":
        """New reference with ``x_c_star`` (and the map's nominal input) recomputed."""
        return ControllerConfig.build(sys_est, x_star, self.K_P, self.K_I, self.K_D, self.K_L, self.monotone)

    def with_gains(self, **gains) -> "ControllerConfig":
        """Replace gains; ``x_c_star`` is rescaled so ``K_I x_c_star`` is kept."""
        u_star = self.K_I @ self.x_c_star
        new = replace(self, **gains)
        return replace(new, x_c_star=np.linalg.solve(new.K_I, u_star))


def kernel_args(sys: PHSystem, cfg: ControllerConfig) -> tuple:
    """Pack ``(sys, cfg)`` into the positional arrays used by :mod:`kernels`."""
    if sys.m != cfg.m or cfg.x_star.shape != (sys.n,):
        raise ValueError("controller and system dimensions disagree")
    F0 = np.ascontiguousarray((sys.J0 - sys.R) @ sys.Q)
    JQ = np.ascontiguousarray(sys.Js @ sys.Q)
    GsTQ = np.ascontiguousarray(input_matrix(sys, cfg.x_star).T @ sys.Q)
    KL = np.ascontiguousarray(cfg.leakage())
    KLKI = np.ascontiguousarray(KL @ cfg.K_I)
    mp = cfg.monotone
    m = cfg.m
    if mp is None:
        kind, lam, u0, a, c = 0, np.ones(m), np.zeros(m), np.ones(m), np.zeros(m)
        lo, hi = np.full(m, -np.inf), np.full(m, np.inf)
        wcs = cfg.K_I @ cfg.x_c_star
    else:
        kind, lam, u0, a, c = mp.code, mp.lam, mp.u0, mp.a, mp.c
        lo, hi = mp.open_bounds
        wcs = mp(cfg.K_I @ cfg.x_c_star)
    arr = lambda z: np.ascontiguousarray(z, dtype=float)  # noqa: E731
    return (F0, JQ, arr(sys.E), GsTQ, arr(cfg.K_P), arr(cfg.K_I), arr(cfg.K_D), KL, KLKI,
            arr(cfg.x_c_star), arr(wcs), kind, arr(lam), arr(u0), arr(a), arr(c), arr(lo), arr(hi))


def evaluate(cfg: ControllerConfig, sys: PHSystem, x, x_c, v_guess=None):
    """``(dx, dx_c, u, v)`` of the closed loop at ``(x, x_c)``."""
    x = np.ascontiguousarray(x, dtype=float)
    x_c = np.ascontiguousarray(np.atleast_1d(x_c), dtype=float)
    args = kernel_args(sys, cfg)
    if v_guess is None:
        v_guess = cfg.K_I @ x_c
    v_guess = np.ascontiguousarray(v_guess, dtype=float)
    dx, dxc, u, v, status = kernels.closed_loop(x, x_c, v_guess, *args)
    if status != kernels.STATUS_OK:
        raise LoopSolveError("monotone loop did not converge")
    return dx, dxc, u, v


def control_output(cfg: ControllerConfig, sys: PHSystem, x, x_c) -> np.ndarray:
    return evaluate(cfg, sys, x, x_c)[2]


def integrator_rhs(cfg: ControllerConfig, sys: PHSystem, x, x_c) -> np.ndarray:
    return evaluate(cfg, sys, x, x_c)[1]


def droop_slope(cfg: ControllerConfig) -> np.ndarray:
    """Steady-state slope ``K_P + K_L^-1`` between input and passive output."""
    if cfg.K_L is None:
        raise ValueError("droop slope needs a leakage gain")
    return cfg.K_P + np.linalg.inv(cfg.K_L)


def closed_loop_equilibrium(sys: PHSystem, cfg: ControllerConfig, x_guess=None):
    """Steady state ``(x_bar, x_c_bar)`` of plant plus controller near a guess.

    At rest the derivative action vanishes, so the unknowns reduce to the
    co-energy ``e = Q x`` and the map argument ``v``:
    ``f + g w(v) = 0`` and ``y + K_L [w(K_I x_c) - w(K_I x_c*)] = 0`` with
    ``K_I x_c = v + K_P y``. Without leakage the second block is ``y = 0``.
    """
    x0 = cfg.x_star if x_guess is None else np.asarray(x_guess, dtype=float)
    mp = cfg.monotone
    w = (lambda s: s) if mp is None else mp
    winv = (lambda u: u) if mp is None else mp.inverse
    Gs = input_matrix(sys, cfg.x_star)
    Qinv = np.linalg.inv(sys.Q)
    KL = cfg.leakage()
    wcs = w(cfg.K_I @ cfg.x_c_star)
    e0 = sys.Q @ x0
    try:
        v0 = winv(equilibrium_control(sys, x0))
    except ValueError:
        v0 = cfg.K_I @ cfg.x_c_star
    es = np.maximum(np.abs(e0), 1e-9 * np.abs(e0).max())
    u_ref = cfg.K_I @ cfg.x_c_star
    rs = np.abs((sys.J0 - sys.R) @ e0) + np.abs(sys.E) + np.abs(input_matrix(sys, x0) @ u_ref)
    rs = np.maximum(rs, 1e-9 * rs.max())
    ys = np.abs(Gs).T @ np.abs(e0) + 1e-300

    def resid(z):
        e = z[:sys.n] * es
        v = z[sys.n:]
        x = Qinv @ e
        y = Gs.T @ e
        r1 = (sys.J0 - sys.R) @ e + sys.E + input_matrix(sys, x) @ w(v)
        if cfg.K_L is None:
            r2 = y
        else:
            r2 = y + KL @ (w(v + cfg.K_P @ y) - wcs)
        return np.concatenate([r1 / rs, r2 / ys])

    sol = optimize.root(resid, np.concatenate([e0 / es, v0]), method="hybr", tol=1e-15)
    r = resid(sol.x)
    if not np.all(np.isfinite(sol.x)) or np.max(np.abs(r)) > 1e-9:
        raise RuntimeError(f"closed-loop equilibrium not found: {sol.message}")
    e = sol.x[:sys.n] * es
    v = sol.x[sys.n:]
    x = Qinv @ e
    x_c = np.linalg.solve(cfg.K_I, v + cfg.K_P @ (Gs.T @ e))
    return x, x_c

"""Event-driven closed-loop simulation and trajectory diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .controllers import ControllerConfig, closed_loop_equilibrium, kernel_args
from .phs import PHSystem

GUARD_FACTOR = 1e6
INTEGRATORS = {"rk4": kernels.integrate, "sdirk2": kernels.integrate_stiff}


class SimulationError(RuntimeError):
    """Raised when the closed loop diverges or the control loop cannot be solved.

    The partial trajectory up to the failure is kept in ``trajectory``.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class Event:
    """Parameter or reference change applied atomically at ``time``.

    Any combination of fields may be set. ``x_star`` triggers a recomputation
    of the integrator reference through the estimated model.
    """

    time: float
    x_star: np.ndarray | None = None
    E: np.ndarray | None = None
    R: np.ndarray | None = None
    gains: dict | None = None
    label: str = ""


@dataclass(frozen=True)
class Scenario:
    duration: float
    dt: float
    x0: np.ndarray
    x_c0: np.ndarray
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        if not (self.dt > 0 and self.duration > 0):
            raise ValueError("dt and duration must be positive")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x_c0", np.atleast_1d(np.asarray(self.x_c0, dtype=float)))
        object.__setattr__(self, "events", tuple(self.events))
        times = [ev.time for ev in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > self.duration):
            raise ValueError("event times must lie within [0, duration]")
        self.step_index(self.duration)
        for t in times:
            self.step_index(t)

    def step_index(self, t: float) -> int:
        k = round(t / self.dt)
        if abs(k * self.dt - t) > 1e-9 * max(abs(t), self.dt):
            raise ValueError(f"time {t} is not a multiple of dt={self.dt}")
        return int(k)

    @property
    def nsteps(self) -> int:
        return self.step_index(self.duration)


@dataclass
class Segment:
    """Interval between events, with the configuration active over it."""

    t_start: float
    t_end: float
    start: int
    stop: int
    sys: PHSystem
    cfg: ControllerConfig


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controller_states: np.ndarray
    controls: np.ndarray
    outputs: np.ndarray
    hamiltonian: np.ndarray
    lyapunov: np.ndarray | None = None
    segments: list[Segment] = field(default_factory=list)
    status: str = "ok"

    def __len__(self):
        return self.times.size

    def window(self, t0: float, t1: float) -> slice:
        """Sample indices with ``t0 <= t < t1``."""
        i0 = int(np.searchsorted(self.times, t0 - 1e-12, side="left"))
        i1 = int(np.searchsorted(self.times, t1 - 1e-12, side="left"))
        return slice(i0, i1)


def step(sys: PHSystem, cfg: ControllerConfig, x, x_c, dt: float):
    """One RK4 step; returns ``(x_next, x_c_next, u_emitted)``."""
    x = np.ascontiguousarray(x, dtype=float)
    x_c = np.ascontiguousarray(np.atleast_1d(x_c), dtype=float)
    v0 = np.ascontiguousarray(cfg.K_I @ x_c)
    xn, xcn, u, _, status = kernels.rk4_step(x, x_c, v0, dt, *kernel_args(sys, cfg))
    if status != kernels.STATUS_OK:
        raise SimulationError("control loop could not be solved")
    return xn, xcn, u


def _apply(ev: Event, sys: PHSystem, cfg: ControllerConfig, sys_est: PHSystem):
    if ev.E is not None:
        sys = sys.with_source(ev.E)
    if ev.R is not None:
        sys = sys.with_dissipation(ev.R)
    if ev.gains:
        cfg = cfg.with_gains(**ev.gains)
    if ev.x_star is not None:
        cfg = cfg.with_reference(sys_est, ev.x_star)
    return sys, cfg


def run_scenario(sys: PHSystem, cfg: ControllerConfig, scenario: Scenario, *, sys_est: PHSystem | None = None,
                 decimate: int = 1, lyapunov: Callable | None = None, allow_failure: bool = False,
                 method: str = "rk4") -> Trajectory:
    """Simulate ``scenario`` with plant ``sys`` and controller ``cfg``.

    Samples are taken every ``decimate`` steps plus the final state.
    ``sys_est`` is the model used to complete new references (defaults to
    ``sys``). ``lyapunov(X, XC)`` adds a column of function values. With
    ``allow_failure`` a diverged run returns the partial trajectory with a
    non-ok ``status`` instead of raising. ``method="sdirk2"`` selects the
    L-stable implicit step for stiff loops (high proportional gain on
    high-voltage systems).
    """
    if method not in INTEGRATORS:
        raise ValueError(f"unknown method {method!r}")
    if decimate < 1:
        raise ValueError("decimate must be >= 1")
    sys_est = sys if sys_est is None else sys_est
    n_total = scenario.nsteps
    guard = GUARD_FACTOR * max(float(np.linalg.norm(scenario.x0)), 1e-300)
    events = sorted(scenario.events, key=lambda ev: ev.time)
    x = scenario.x0.copy()
    x_c = scenario.x_c0.copy()
    v = cfg.K_I @ x_c
    k = 0
    chunks = []
    segments = []
    status = "ok"
    pending = list(events)
    while True:
        while pending and scenario.step_index(pending[0].time) <= k:
            sys, cfg = _apply(pending.pop(0), sys, cfg, sys_est)
        k_end = scenario.step_index(pending[0].time) if pending else n_total
        n = k_end - k
        seg = Segment(k * scenario.dt, k_end * scenario.dt, 0, 0, sys, cfg)
        if n > 0:
            args = kernel_args(sys, cfg)
            X, XC, U, Y, x, x_c, v, st, done = INTEGRATORS[method](
                np.ascontiguousarray(x), np.ascontiguousarray(x_c), np.ascontiguousarray(v),
                n, scenario.dt, decimate, k, guard, *args)
            first = (decimate - k % decimate) % decimate
            T = (k + first + decimate * np.arange(X.shape[0])) * scenario.dt
            chunks.append((T, X, XC, U, Y))
            if st != kernels.STATUS_OK:
                status = "diverged" if st == kernels.STATUS_DIVERGED else "loop-failure"
                segments.append(seg)
                break
        segments.append(seg)
        k = k_end
        if k >= n_total:
            break
    if status == "ok":
        dx, dxc, u, _, st = kernels.closed_loop(np.ascontiguousarray(x), np.ascontiguousarray(x_c),
                                                np.ascontiguousarray(v), *kernel_args(sys, cfg))
        y = kernel_args(sys, cfg)[3] @ x
        chunks.append((np.array([n_total * scenario.dt]), x[None], x_c[None], u[None], y[None]))
    T, X, XC, U, Y = (np.concatenate(parts) for parts in zip(*chunks))
    # sample ranges per segment
    for seg in segments:
        sl = np.searchsorted(T, [seg.t_start - 1e-12, seg.t_end - 1e-12])
        seg.start, seg.stop = int(sl[0]), int(sl[1])
    segments[-1].stop = T.size
    H = 0.5 * np.einsum("ti,ij,tj->t", X, sys.Q, X)
    L = lyapunov(X, XC) if lyapunov is not None else None
    traj = Trajectory(T, X, XC, U, Y, H, L, segments, status)
    if status != "ok" and not allow_failure:
        raise SimulationError(f"simulation stopped at t={T[-1]:.6g} s: {status}", traj)
    return traj


def steady_state(traj: Trajectory, window: float, tol: float, t_end: float | None = None,
                 scale=None) -> np.ndarray | None:
    """Mean state over the trailing ``window`` before ``t_end`` if it has settled.

    Settled means the per-component spread divided by ``scale`` (default:
    the magnitude of the mean, floored at 1e-9 of the largest one) stays
    below ``tol``. Returns ``None`` otherwise or when the run failed.
    """
    if traj.status != "ok":
        return None
    t_end = traj.times[-1] + 1e-12 if t_end is None else t_end
    sl = traj.window(t_end - window, t_end)
    Xw = traj.states[sl]
    if Xw.shape[0] < 2 or not np.all(np.isfinite(Xw)):
        return None
    mean = Xw.mean(axis=0)
    if scale is None:
        scale = np.maximum(np.abs(mean), 1e-9 * np.abs(mean).max())
    spread = (Xw.max(axis=0) - Xw.min(axis=0)) / scale
    return mean if np.all(spread < tol) else None


def exponential_envelope(times, values, alpha: float, slack: float = 0.05) -> tuple[bool, float]:
    """Check ``V(t) <= V(0) exp(-alpha t) (1 + slack)`` on every sample.

    Returns the verdict and the largest ratio ``V(t) / (V(0) exp(-alpha t))``.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    t = times - times[0]
    env = values[0] * np.exp(-alpha * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, values / env, np.where(values <= 0, 1.0, math.inf))
    worst = float(np.max(ratio))
    return bool(worst <= 1.0 + slack), worst


def monotone_violations(values, rtol: float) -> int:
    """Number of sample-to-sample increases larger than ``rtol * max|V|``."""
    values = np.asarray(values, dtype=float)
    tol = rtol * np.abs(values).max()
    return int(np.count_nonzero(np.diff(values) > tol))


def segment_lyapunov(traj: Trajectory) -> np.ndarray:
    """Lyapunov function of each segment about that segment's closed-loop equilibrium.

    The equilibrium is solved from the segment's final sample; the
    function is the one matching the controller variant (``epsilon = 0``
    for the PID-PBC).
    """
    from .stability import lyapunov_series

    out = np.full(traj.times.size, np.nan)
    for seg in traj.segments:
        sl = slice(seg.start, seg.stop)
        if seg.stop <= seg.start:
            continue
        x_bar, x_c_bar = closed_loop_equilibrium(seg.sys, seg.cfg, traj.states[seg.stop - 1])
        out[sl] = lyapunov_series(seg.cfg.variant, seg.sys, seg.cfg, x_bar, x_c_bar,
                                  traj.states[sl], traj.controller_states[sl])
    return out

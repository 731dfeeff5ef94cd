"""Assignable equilibria, equilibrium controls and robustness scalars."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phs import PHSystem, drift, hamiltonian, input_matrix

RANK_RTOL = 1e-10


class SingularityError(ValueError):
    """Raised when ``g(x)`` loses column rank."""


class InfeasibleError(ValueError):
    """Raised when a power-flow equation has no real solution."""


@dataclass(frozen=True)
class EquilibriumPoint:
    x_bar: np.ndarray
    u_bar: np.ndarray
    residual: float


@dataclass(frozen=True)
class PowerFlowReport:
    """Power-flow quantities at a (possibly misestimated) reference.

    ``gamma`` is the ratio net/loss power; the closed loop settles at
    ``gamma * x_star`` and ``delta_x = |gamma - 1|``.
    """

    p_loss: float
    p_net: float
    gamma: float
    delta_x: float
    stable: bool
    delta_x_approx: float | None = None


def left_pinv(g: np.ndarray) -> np.ndarray:
    """Moore-Penrose left pseudoinverse; raises on rank deficiency."""
    U, s, Vt = np.linalg.svd(g, full_matrices=False)
    if s.size == 0 or s[0] == 0.0 or s[-1] <= RANK_RTOL * s[0]:
        raise SingularityError("input matrix is rank deficient")
    return (Vt.T / s) @ U.T


def left_annihilator(g: np.ndarray) -> np.ndarray:
    """Orthonormal rows spanning the left null space of ``g``."""
    U, s, _ = np.linalg.svd(g, full_matrices=True)
    tol = RANK_RTOL * s[0] if s.size and s[0] > 0 else 0.0
    rank = int(np.sum(s > tol)) if tol > 0 else 0
    return U[:, rank:].T


def equilibrium_control(sys: PHSystem, x_bar) -> np.ndarray:
    x_bar = np.asarray(x_bar, dtype=float)
    return -left_pinv(input_matrix(sys, x_bar)) @ drift(sys, x_bar)


def power_terms(sys: PHSystem, x) -> tuple[float, float]:
    """(dissipated, net supplied) power at steady state, watt."""
    e = sys.Q @ np.asarray(x, dtype=float)
    return float(e @ sys.R @ e), float(sys.E @ e)


def assignability_residual(sys: PHSystem, x) -> float:
    """Distance of ``x`` from the assignable set.

    Systems with ``m = n - 1`` use the scalar power-flow form (watt); other
    systems use ``||g_perp(x) f(x)||`` with an orthonormal annihilator.
    """
    x = np.asarray(x, dtype=float)
    if sys.m == sys.n - 1:
        p_loss, p_net = power_terms(sys, x)
        return abs(p_net - p_loss)
    N = left_annihilator(input_matrix(sys, x))
    if N.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(N @ drift(sys, x)))


def is_assignable(sys: PHSystem, x, rtol: float = 1e-9) -> bool:
    x = np.asarray(x, dtype=float)
    if sys.m == sys.n - 1:
        p_loss, p_net = power_terms(sys, x)
        scale = p_loss + abs(p_net)
    else:
        scale = np.linalg.norm((sys.J0 - sys.R) @ sys.Q @ x) + np.linalg.norm(sys.E)
    return assignability_residual(sys, x) <= rtol * max(scale, 1e-300)


def equilibrium_point(sys: PHSystem, x_bar) -> EquilibriumPoint:
    x_bar = np.asarray(x_bar, dtype=float)
    return EquilibriumPoint(x_bar, equilibrium_control(sys, x_bar), assignability_residual(sys, x_bar))


def gamma(sys_actual: PHSystem, x_star) -> PowerFlowReport:
    """Steady-state scaling of the PID-PBC under parameter mismatch.

    Valid for systems with ``rank g = n - 1``; ``sys_actual`` carries the
    true dissipation and sources.
    """
    x_star = np.asarray(x_star, dtype=float)
    p_loss, p_net = power_terms(sys_actual, x_star)
    if p_loss <= 0.0:
        raise ValueError("dissipated power vanishes at x_star")
    gam = p_net / p_loss
    return PowerFlowReport(p_loss, p_net, gam, abs(gam - 1.0), p_net > 0.0)


def zero_dynamics_coeffs(sys: PHSystem, x_star) -> tuple[float, float, float]:
    """Coefficients of ``H* dz/dt = -P_loss z + P_net`` (equilibrium at gamma)."""
    p_loss, p_net = power_terms(sys, x_star)
    return hamiltonian(sys, np.asarray(x_star, dtype=float)), p_loss, p_net


def input_feasibility(sys: PHSystem, gamma_value: float, x_star, u_min, u_max) -> bool:
    """Whether the equilibrium control at ``gamma * x_star`` lies in the box."""
    x = gamma_value * np.asarray(x_star, dtype=float)
    try:
        u = equilibrium_control(sys, x)
    except SingularityError:
        return False
    u_min = np.broadcast_to(np.asarray(u_min, dtype=float), u.shape)
    u_max = np.broadcast_to(np.asarray(u_max, dtype=float), u.shape)
    return bool(np.all(np.isfinite(u)) and np.all(u >= u_min) and np.all(u <= u_max))


def per_unit_deviation(x_bar, x_star, normalize: str = "reference") -> np.ndarray:
    """Componentwise ``|x_bar - x_star|`` over ``|x_star|`` or ``|x_bar|``.

    With ``x_bar = gamma x_star`` the reference normalization gives
    ``|gamma - 1|`` and the steady-state normalization ``|gamma - 1| / gamma``.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    if normalize == "reference":
        den = x_star
    elif normalize == "steady":
        den = x_bar
    else:
        raise ValueError("normalize must be 'reference' or 'steady'")
    return np.abs(x_bar - x_star) / np.abs(den)


# -- application power flows -------------------------------------------------

def _quadratic_roots(a: float, b: float, c: float) -> tuple[float, float]:
    """Real roots of ``a r^2 + b r + c`` in ascending order, cancellation-free."""
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        raise InfeasibleError("power-flow equation has no real solution")
    sq = np.sqrt(disc)
    q = -0.5 * (b + np.copysign(sq, b))
    if q == 0.0:
        return 0.0, 0.0
    r1, r2 = q / a, c / q
    return (r1, r2) if r1 <= r2 else (r2, r1)


def solve_boost_powerflow(params, v_C_star: float, estimated: bool = True) -> float:
    """Inductor current (A) on the low-current branch for a demanded voltage."""
    p = params
    G0 = p.G0_hat if estimated else p.G0_actual
    i0 = p.i0_hat if estimated else p.i0_actual
    c = (p.G + G0) * v_C_star**2 + i0 * v_C_star
    lo, _ = _quadratic_roots(p.R, -p.v0, c)
    # one Newton polish on the residual
    res = -p.R * lo**2 + p.v0 * lo - c
    slope = -2.0 * p.R * lo + p.v0
    if slope != 0.0:
        lo += -res / slope
    return float(lo)


def boost_powerflow_residual(params, i_L: float, v_C: float, estimated: bool = True) -> float:
    p = params
    G0 = p.G0_hat if estimated else p.G0_actual
    i0 = p.i0_hat if estimated else p.i0_actual
    return float(-p.R * i_L**2 - (p.G + G0) * v_C**2 + p.v0 * i_L - i0 * v_C)


def solve_vsc_powerflow(params, i_d_star: float, i_q_star: float, estimated: bool = True):
    """dc voltage (V) nearest the nominal source and line currents (A)."""
    p = params
    V2 = p.V2_hat if estimated else p.V2_actual
    gT = float(np.sum(p.G_T))
    a = p.G + gT
    b = -gT * V2
    c = p.R * (i_d_star**2 + i_q_star**2) + p.V_d * i_d_star
    if c == 0.0 and a > 0:
        roots = (0.0, -b / a)
    else:
        roots = _quadratic_roots(a, b, c)
    v1 = min(roots, key=lambda r: abs(r - p.V2_hat))
    res = -(a * v1**2 + b * v1 + c)
    slope = -(2.0 * a * v1 + b)
    if slope != 0.0:
        v1 += -res / slope
    i_T = np.asarray(p.G_T, dtype=float) * (V2 - v1)
    return float(v1), i_T


def vsc_powerflow_residual(params, i_d, i_q, v1, estimated: bool = True) -> float:
    p = params
    V2 = p.V2_hat if estimated else p.V2_actual
    gT = float(np.sum(p.G_T))
    return float(-p.R * (i_d**2 + i_q**2) - (p.G + gT) * v1**2 - p.V_d * i_d + gT * v1 * V2)


def vsc_gamma(params, x_star) -> PowerFlowReport:
    """Scaling of ``(i_d, i_q, v1)`` under the true far-end voltage.

    Line currents are eliminated, so this differs from :func:`gamma` applied
    to the full six-state model.
    """
    p = params
    z = params.coenergy(x_star)
    i_d, i_q, v1 = z[0], z[1], z[2]
    gT = float(np.sum(p.G_T))
    p_net = -p.V_d * i_d + gT * v1 * p.V2_actual
    p_loss = p.R * (i_d**2 + i_q**2) + (p.G + gT) * v1**2
    gam = p_net / p_loss
    approx = abs(p.V2_actual - p.V2_hat) / v1
    return PowerFlowReport(float(p_loss), float(p_net), float(gam), float(abs(gam - 1.0)), bool(gam > 0.0),
                           float(approx))


def vsc_delta_x(params, x_star) -> float:
    """Closed-form deviation ``gT v1* |V2 - V2_hat| / P_loss`` for ``x_star`` on the estimated flow."""
    p = params
    z = params.coenergy(x_star)
    gT = float(np.sum(p.G_T))
    den = p.R * (z[0] ** 2 + z[1] ** 2) + (p.G + gT) * z[2] ** 2
    return float(gT * z[2] * abs(p.V2_actual - p.V2_hat) / den)

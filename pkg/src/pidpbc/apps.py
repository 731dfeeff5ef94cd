"""Boost dc/dc converter and HVDC two-level VSC models.

Parameters are stored in SI units. ``*_hat`` fields are the values known to
the controller; ``*_actual`` fields drive the plant.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .phs import PHSystem


def _elementary_skew(n: int, i: int, k: int) -> np.ndarray:
    J = np.zeros((n, n))
    J[i, k] = 1.0
    J[k, i] = -1.0
    return J


@dataclass(frozen=True)
class BoostParams:
    L: float = 1.12e-3
    C: float = 6.8e-3
    R: float = 10e-3
    G: float = 50e-3
    v0: float = 278.0
    G0_hat: float = 40e-3
    G0_actual: float = 40e-3
    i0_hat: float = 20.0
    i0_actual: float = 20.0
    u_min: float = 0.1
    u_max: float = 0.9

    def __post_init__(self):
        for name in ("L", "C", "R", "G", "v0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("G0_hat", "G0_actual", "i0_hat", "i0_actual"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.u_min < self.u_max <= 1.0:
            raise ValueError("need 0 <= u_min < u_max <= 1")

    def with_load(self, **kw) -> "BoostParams":
        return replace(self, **kw)

    def state(self, i_L: float, v_C: float) -> np.ndarray:
        return np.array([self.L * i_L, self.C * v_C])

    def coenergy(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) / np.array([self.L, self.C])

    @property
    def u_bounds(self):
        return np.array([self.u_min]), np.array([self.u_max])


def build_boost(params: BoostParams, estimated: bool = False) -> PHSystem:
    """Boost converter feeding a constant-impedance, constant-current load."""
    p = params
    G0 = p.G0_hat if estimated else p.G0_actual
    i0 = p.i0_hat if estimated else p.i0_actual
    J0 = np.array([[0.0, -1.0], [1.0, 0.0]])
    return PHSystem(
        Q=np.diag([1.0 / p.L, 1.0 / p.C]),
        R=np.diag([p.R, p.G + G0]),
        J0=J0,
        Js=(-J0)[None],
        E=np.array([p.v0, -i0]),
    )


@dataclass(frozen=True)
class VscParams:
    L: float = 78.2e-3
    C: float = 37.32e-6
    R: float = 0.65
    G: float = 1e-6
    f_hz: float = 50.0
    V_d: float = 310.27e3
    V2_hat: float = 775e3
    V2_actual: float = 775e3
    R_T: tuple = (530.96, 24.35, 3.20)
    L_T: tuple = (120.3e-3, 60.4e-3, 559.6e-3)
    u_min: float = -2.0 / 3.0
    u_max: float = 2.0 / 3.0
    G_T: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        R_T = tuple(float(r) for r in self.R_T)
        L_T = tuple(float(v) for v in self.L_T)
        if len(R_T) != 3 or len(L_T) != 3:
            raise ValueError("line needs exactly three RL branches")
        for name in ("L", "C", "R", "G", "f_hz", "V_d", "V2_hat", "V2_actual"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(R_T) <= 0 or min(L_T) <= 0:
            raise ValueError("line parameters must be positive")
        if not self.u_min < self.u_max:
            raise ValueError("need u_min < u_max")
        object.__setattr__(self, "R_T", R_T)
        object.__setattr__(self, "L_T", L_T)
        object.__setattr__(self, "G_T", 1.0 / np.array(R_T))

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.f_hz

    def with_source(self, V2_actual: float) -> "VscParams":
        return replace(self, V2_actual=V2_actual)

    def _scales(self) -> np.ndarray:
        return np.array([self.L, self.L, self.C, *self.L_T])

    def state(self, i_d, i_q, v1, i_T) -> np.ndarray:
        return self._scales() * np.array([i_d, i_q, v1, *np.asarray(i_T, dtype=float)])

    def coenergy(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) / self._scales()

    @property
    def u_bounds(self):
        return np.full(2, self.u_min), np.full(2, self.u_max)

    def current_refs(self, P_watt: float, Q_var: float) -> tuple[float, float]:
        """dq current references from active/reactive power set-points."""
        return 2.0 * P_watt / (3.0 * self.V_d), 2.0 * Q_var / (3.0 * self.V_d)


def build_vsc(params: VscParams, estimated: bool = False) -> PHSystem:
    """Terminal converter plus three-branch dc line to a stiff far-end source.

    State order: (phi_d, phi_q, q_1, phi_T1, phi_T2, phi_T3). The coupling
    signs follow the terminal and line ODEs: the line currents charge the
    dc capacitor and ``V2 - v1`` drives the line.
    """
    p = params
    n = 6
    J0 = p.L * p.omega * _elementary_skew(n, 1, 0)
    for k in range(3):
        J0 = J0 + _elementary_skew(n, 2, 3 + k)
    Js = np.stack([_elementary_skew(n, 0, 2), _elementary_skew(n, 1, 2)])
    V2 = p.V2_hat if estimated else p.V2_actual
    return PHSystem(
        Q=np.diag([1.0 / p.L, 1.0 / p.L, 1.0 / p.C, *(1.0 / np.array(p.L_T))]),
        R=np.diag([p.R, p.R, p.G, *p.R_T]),
        J0=J0,
        Js=Js,
        E=np.array([-p.V_d, 0.0, 0.0, V2, V2, V2]),
    )

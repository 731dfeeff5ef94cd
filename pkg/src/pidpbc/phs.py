"""Bilinear port-Hamiltonian converter models.

A model is ``dx/dt = (J0 + sum_i Ji u_i - R) Q x + E`` with energy
``H(x) = x'Qx / 2``. States are energy variables (inductor fluxes in Wb,
capacitor charges in C); ``Q x`` gives the co-energy variables (A, V).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _skew_from(J: np.ndarray, name: str) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    scale = max(np.abs(J).max(initial=0.0), 1.0)
    if np.abs(J + J.T).max(initial=0.0) > 1e-12 * scale:
        raise ValueError(f"{name} is not skew-symmetric")
    upper = np.triu(J, 1)
    return upper - upper.T


def _check_spd(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * max(np.abs(M).max(), 1e-300)):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0.0:
        raise ValueError(f"{name} must be positive definite")


@dataclass(frozen=True)
class PHSystem:
    """Immutable bilinear pH model.

    ``Js`` is stacked as an ``(m, n, n)`` array. Skew matrices are rebuilt
    from their strict upper triangle so ``J + J'`` is exactly zero.
    """

    Q: np.ndarray
    R: np.ndarray
    J0: np.ndarray
    Js: np.ndarray
    E: np.ndarray
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        n = Q.shape[0]
        if Q.shape != (n, n) or R.shape != (n, n):
            raise ValueError("Q and R must be square with matching size")
        Js = np.asarray(self.Js, dtype=float)
        if Js.ndim == 2:
            Js = Js[None]
        if Js.ndim != 3 or Js.shape[1:] != (n, n) or Js.shape[0] < 1:
            raise ValueError("Js must be a stack of n x n matrices")
        E = np.asarray(self.E, dtype=float).reshape(-1)
        if E.shape != (n,):
            raise ValueError("E must have length n")
        _check_spd(Q, "Q")
        _check_spd(R, "R")
        J0 = _skew_from(self.J0, "J0")
        if J0.shape != (n, n):
            raise ValueError("J0 must be n x n")
        Js = np.stack([_skew_from(J, f"J{i + 1}") for i, J in enumerate(Js)])
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "J0", _frozen(J0))
        object.__setattr__(self, "Js", _frozen(Js))
        object.__setattr__(self, "E", _frozen(E))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", Js.shape[0])

    def with_source(self, E) -> "PHSystem":
        return replace(self, E=E)

    def with_dissipation(self, R) -> "PHSystem":
        return replace(self, R=R)


class PowerBalance(NamedTuple):
    stored: float
    dissipated: float
    control: float
    supplied: float


def _state(sys: PHSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},), got {x.shape}")
    return x


def _input(sys: PHSystem, u) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (sys.m,):
        raise ValueError(f"input must have shape ({sys.m},), got {u.shape}")
    return u


def hamiltonian(sys: PHSystem, x) -> float:
    """Stored energy in joule."""
    x = _state(sys, x)
    return 0.5 * float(x @ sys.Q @ x)


def drift(sys: PHSystem, x) -> np.ndarray:
    x = _state(sys, x)
    return (sys.J0 - sys.R) @ (sys.Q @ x) + sys.E


def input_matrix(sys: PHSystem, x) -> np.ndarray:
    """``n x m`` matrix whose i-th column is ``Ji Q x``."""
    x = _state(sys, x)
    return (sys.Js @ (sys.Q @ x)).T


def dynamics(sys: PHSystem, x, u) -> np.ndarray:
    x = _state(sys, x)
    u = _input(sys, u)
    return drift(sys, x) + input_matrix(sys, x) @ u


def passive_output(sys: PHSystem, x_ref, x) -> np.ndarray:
    """``g(x_ref)' Q x``; vanishes at ``x = x_ref``."""
    x = _state(sys, x)
    return input_matrix(sys, x_ref).T @ (sys.Q @ x)


def power_balance(sys: PHSystem, x, u) -> PowerBalance:
    """Split ``dH/dt`` into dissipated, control-port and supplied power (W)."""
    x = _state(sys, x)
    u = _input(sys, u)
    e = sys.Q @ x
    dissipated = float(e @ sys.R @ e)
    control = float(e @ (input_matrix(sys, x) @ u))
    supplied = float(e @ sys.E)
    stored = float(e @ dynamics(sys, x, u))
    return PowerBalance(stored, dissipated, control, supplied)


def power_flows(sys: PHSystem, X, U) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise ``(dissipated, control, supplied)`` power for states ``X`` and inputs ``U``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if X.shape[1] != sys.n or U.shape != (X.shape[0], sys.m):
        raise ValueError("X must be (T, n) and U (T, m)")
    e = X @ sys.Q
    gu = np.einsum("kij,tj,tk->ti", sys.Js, e, U)
    return np.einsum("ti,ij,tj->t", e, sys.R, e), np.einsum("ti,ti->t", e, gu), e @ sys.E

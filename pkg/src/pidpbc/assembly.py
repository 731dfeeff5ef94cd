"""Turn parsed configuration into plant models, controllers and scenarios."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .apps import BoostParams, VscParams, build_boost, build_vsc
from .config import ControllerSpec, ScenarioConfig, SystemConfig
from .controllers import ControllerConfig, closed_loop_equilibrium
from .equilibria import solve_boost_powerflow, solve_vsc_powerflow
from .phs import PHSystem
from .sim import Event, Scenario

BUILDERS = {"boost": build_boost, "vsc": build_vsc}


@dataclass(frozen=True)
class Plant:
    """Actual and estimated models with the completed reference and controller."""

    kind: str
    params: BoostParams | VscParams
    actual: PHSystem
    estimated: PHSystem
    x_star: np.ndarray
    controller: ControllerConfig


def reference_state(kind: str, params, reference: dict) -> np.ndarray:
    """Complete the desired components into ``x_star`` through the estimated power flow."""
    if kind == "boost":
        v = reference["v_C"]
        return params.state(solve_boost_powerflow(params, v), v)
    if "P" in reference:
        i_d, i_q = params.current_refs(reference["P"], reference["Q"])
    else:
        i_d, i_q = reference["i_d"], reference["i_q"]
    v1, i_T = solve_vsc_powerflow(params, i_d, i_q)
    return params.state(i_d, i_q, v1, i_T)


def build_controller(spec: ControllerSpec, params, sys_est: PHSystem, x_star) -> ControllerConfig:
    monotone = None
    if spec.monotone:
        lo, hi = params.u_bounds
        monotone = {"u_min": lo, "u_max": hi, "lam": spec.lam}
    return ControllerConfig.build(sys_est, x_star, spec.K_P, spec.K_I, spec.K_D, spec.K_L, monotone)


def build_plant(cfg: SystemConfig) -> Plant:
    build = BUILDERS[cfg.kind]
    act = build(cfg.params)
    est = build(cfg.params, estimated=True)
    x_star = reference_state(cfg.kind, cfg.params, cfg.reference)
    ctrl = build_controller(cfg.controller, cfg.params, est, x_star)
    return Plant(cfg.kind, cfg.params, act, est, x_star, ctrl)


def build_scenario(sc: ScenarioConfig) -> tuple[Plant, Scenario]:
    """Plant at ``t = 0`` and the event schedule in model terms.

    Plant parameter changes become source/dissipation events; reference
    changes are completed with the estimated model, which never changes.
    """
    plant = build_plant(sc.system)
    build = BUILDERS[sc.system.kind]
    params = sc.system.params
    events = []
    for ev in sc.events:
        E = R = x_star = None
        if ev.params:
            params = replace(params, **ev.params)
            act = build(params)
            E, R = act.E, act.R
        if ev.reference:
            x_star = reference_state(sc.system.kind, params, ev.reference)
        gains = dict(ev.gains) or None
        if gains and "K_L" in gains and np.all(np.asarray(gains["K_L"]) == 0.0):
            gains["K_L"] = None
        events.append(Event(ev.time, x_star=x_star, E=E, R=R, gains=gains, label=ev.label))
    if sc.simulation.initial == "equilibrium":
        x0, xc0 = closed_loop_equilibrium(plant.actual, plant.controller)
    else:
        x0, xc0 = plant.x_star, plant.controller.x_c_star
    s = sc.simulation
    return plant, Scenario(s.duration, s.dt, x0, xc0, tuple(events))

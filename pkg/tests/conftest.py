import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from pidpbc.apps import BoostParams, VscParams, build_boost, build_vsc
from pidpbc.equilibria import solve_boost_powerflow, solve_vsc_powerflow

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

# criterion number -> (verdict, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def boost_reference(p: BoostParams, v_C: float) -> np.ndarray:
    return p.state(solve_boost_powerflow(p, v_C), v_C)


def vsc_reference(p: VscParams, P_watt: float, Q_var: float) -> np.ndarray:
    i_d, i_q = p.current_refs(P_watt, Q_var)
    v1, i_T = solve_vsc_powerflow(p, i_d, i_q)
    return p.state(i_d, i_q, v1, i_T)


@pytest.fixture
def boost():
    p = BoostParams()
    return p, build_boost(p), build_boost(p, estimated=True), boost_reference(p, 380.0)


@pytest.fixture
def vsc():
    p = VscParams()
    return p, build_vsc(p), build_vsc(p, estimated=True), vsc_reference(p, 1200e6, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

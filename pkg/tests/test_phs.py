import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pidpbc.apps import BoostParams, VscParams, build_boost, build_vsc
from pidpbc.phs import (PHSystem, drift, dynamics, hamiltonian, input_matrix, passive_output, power_balance,
                        power_flows)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def _random_system(rng, n, m):
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    B = rng.normal(size=(n, n))
    R = B @ B.T + 0.1 * np.eye(n)
    skew = lambda M: M - M.T  # noqa: E731
    return PHSystem(Q, R, skew(rng.normal(size=(n, n))), np.stack([skew(rng.normal(size=(n, n))) for _ in range(m)]),
                    rng.normal(size=n))


# -- construction ---------------------------------------------------------------

def test_skew_matrices_are_exactly_skew(rng):
    sys = _random_system(rng, 5, 3)
    assert np.array_equal(sys.J0 + sys.J0.T, np.zeros((5, 5)))
    for J in sys.Js:
        assert np.array_equal(J + J.T, np.zeros((5, 5)))
    assert (sys.n, sys.m) == (5, 3)


def test_arrays_are_read_only(boost):
    _, sys, _, _ = boost
    with pytest.raises(ValueError):
        sys.Q[0, 0] = 1.0


@pytest.mark.parametrize("bad", [
    dict(Q=-np.eye(2)),
    dict(R=np.array([[1.0, 2.0], [0.0, 1.0]])),
    dict(J0=np.eye(2)),
    dict(Js=np.zeros((1, 3, 3))),
    dict(E=np.zeros(3)),
])
def test_invalid_construction(bad):
    args = dict(Q=np.eye(2), R=np.eye(2), J0=np.array([[0.0, 1.0], [-1.0, 0.0]]), Js=np.zeros((1, 2, 2)),
                E=np.zeros(2))
    args.update(bad)
    with pytest.raises(ValueError):
        PHSystem(**args)


def test_dimension_mismatch(boost):
    _, sys, _, xs = boost
    with pytest.raises(ValueError):
        hamiltonian(sys, np.zeros(3))
    with pytest.raises(ValueError):
        dynamics(sys, xs, np.zeros(2))


# -- boost model ------------------------------------------------------------------

def test_boost_hamiltonian_value(boost):
    p, sys, _, xs = boost
    assert hamiltonian(sys, np.zeros(2)) == 0.0
    assert hamiltonian(sys, xs) == pytest.approx(494.05021202772, rel=1e-13)
    assert hamiltonian(sys, 2 * xs) == pytest.approx(4 * hamiltonian(sys, xs), rel=1e-15)


def test_boost_matrices_round_trip():
    p = BoostParams()
    sys = build_boost(p)
    assert np.array_equal(sys.Q, np.diag([1 / p.L, 1 / p.C]))
    assert np.array_equal(sys.R, np.diag([p.R, p.G + p.G0_actual]))
    assert np.array_equal(sys.Js[0], -sys.J0)
    assert np.array_equal(sys.E, [p.v0, -p.i0_actual])


def test_boost_input_matrix_and_ode():
    p = BoostParams()
    sys = build_boost(p)
    i_L, v_C, u = 50.0, 300.0, 0.4
    x = p.state(i_L, v_C)
    assert np.allclose(input_matrix(sys, x)[:, 0], [v_C, -i_L], rtol=1e-15)
    dx = dynamics(sys, x, [u])
    # L di/dt = -(1-u) v_C - R i + v0 ; C dv/dt = (1-u) i - (G+G0) v - i0
    expect = [-(1 - u) * v_C - p.R * i_L + p.v0, (1 - u) * i_L - (p.G + p.G0_actual) * v_C - p.i0_actual]
    assert np.allclose(dx, expect, rtol=1e-14, atol=1e-12)


def test_boost_passive_output(boost):
    p, sys, _, xs = boost
    i_Ls, v_Cs = p.coenergy(xs)
    x = p.state(60.0, 350.0)
    assert passive_output(sys, xs, x)[0] == pytest.approx(v_Cs * 60.0 - i_Ls * 350.0, rel=1e-13)
    assert abs(passive_output(sys, xs, xs)[0]) < 1e-12 * v_Cs * i_Ls


# -- VSC model ----------------------------------------------------------------------

def test_vsc_structure():
    p = VscParams()
    sys = build_vsc(p)
    assert (sys.n, sys.m) == (6, 2)
    assert np.array_equal(sys.J0 + sys.J0.T, np.zeros((6, 6)))
    i_d, i_q, v1, i_T = 1000.0, -200.0, 7.7e5, np.array([10.0, 200.0, 800.0])
    g = input_matrix(sys, p.state(i_d, i_q, v1, i_T))
    expect = np.zeros((6, 2))
    expect[0, 0] = expect[1, 1] = v1
    expect[2] = [-i_d, -i_q]
    assert np.allclose(g, expect, rtol=1e-14, atol=0.0)


def test_vsc_odes():
    p = VscParams()
    sys = build_vsc(p)
    i_d, i_q, v1, i_T, u = 1000.0, -200.0, 7.7e5, np.array([10.0, 200.0, 800.0]), np.array([0.4, -0.1])
    dx = dynamics(sys, p.state(i_d, i_q, v1, i_T), u)
    w = p.omega
    expect = [
        -p.R * i_d - p.L * w * i_q + v1 * u[0] - p.V_d,
        p.L * w * i_d - p.R * i_q + v1 * u[1],
        -i_d * u[0] - i_q * u[1] - p.G * v1 + i_T.sum(),
        *(-np.array(p.R_T) * i_T - v1 + p.V2_actual),
    ]
    assert np.allclose(dx, expect, rtol=1e-12, atol=1e-6)


def test_vsc_passive_output(vsc):
    p, sys, _, xs = vsc
    zs = p.coenergy(xs)
    x = p.state(1500.0, 300.0, 7.6e5, [1.0, 2.0, 3.0])
    y = passive_output(sys, xs, x)
    assert np.allclose(y, [zs[2] * 1500.0 - zs[0] * 7.6e5, zs[2] * 300.0 - zs[1] * 7.6e5], rtol=1e-12)


# -- generic properties ---------------------------------------------------------------

def test_drift_limits(rng):
    sys = _random_system(rng, 4, 2)
    assert np.array_equal(drift(sys, np.zeros(4)), sys.E)
    lossless = PHSystem(sys.Q, 1e-300 * np.eye(4), np.zeros((4, 4)), sys.Js, np.zeros(4))
    assert np.allclose(drift(lossless, rng.normal(size=4)), 0.0, atol=1e-290)
    assert np.array_equal(input_matrix(sys, np.zeros(4)), np.zeros((4, 2)))


@given(arrays(float, 6, elements=finite), arrays(float, 2, elements=finite))
def test_skew_invariance(x, u):
    sys = build_vsc(VscParams())
    pb = power_balance(sys, x, u)
    # for arbitrary (x, u) the cancelling terms can dwarf the other flows, so
    # roundoff is measured against their absolute sum
    e = sys.Q @ x
    terms = np.abs(e) @ np.abs(sum(J * ui for J, ui in zip(sys.Js, u))) @ np.abs(e)
    assert abs(pb.control) <= 1e-14 * terms + 1e-300


@given(arrays(float, 2, elements=finite), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_dynamics_affine_in_u(x, u1, u2, a):
    sys = build_boost(BoostParams())
    lhs = dynamics(sys, x, [a * u1 + (1 - a) * u2])
    rhs = a * dynamics(sys, x, [u1]) + (1 - a) * dynamics(sys, x, [u2])
    scale = np.abs(drift(sys, x)) + np.abs(input_matrix(sys, x)[:, 0]) + 1.0
    assert np.all(np.abs(lhs - rhs) <= 1e-13 * scale)


def test_power_balance_closes(rng, vsc):
    _, sys, _, xs = vsc
    for _ in range(20):
        x = xs * rng.uniform(0.5, 1.5, 6)
        u = rng.uniform(-2 / 3, 2 / 3, 2)
        pb = power_balance(sys, x, u)
        assert pb.stored == pytest.approx(-pb.dissipated + pb.control + pb.supplied,
                                          abs=1e-12 * (pb.dissipated + abs(pb.supplied)))
    assert power_balance(sys, np.zeros(6), [0.1, 0.2]) == (0.0, 0.0, 0.0, 0.0)


def test_power_flows_matches_pointwise(rng, vsc):
    _, sys, _, xs = vsc
    X = xs * rng.uniform(0.5, 1.5, (30, 6))
    U = rng.uniform(-0.6, 0.6, (30, 2))
    d, c, s = power_flows(sys, X, U)
    for k in range(30):
        pb = power_balance(sys, X[k], U[k])
        assert d[k] == pytest.approx(pb.dissipated, rel=1e-13)
        assert s[k] == pytest.approx(pb.supplied, rel=1e-13)
        assert abs(c[k] - pb.control) <= 1e-12 * pb.dissipated
    with pytest.raises(ValueError):
        power_flows(sys, X, U[:5])


def test_hamiltonian_rate_along_trajectory(boost):
    """dH/dt from finite differences matches the power balance (incremental passivity)."""
    from pidpbc.controllers import ControllerConfig
    from pidpbc.sim import Scenario, run_scenario

    p, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, K_P=1e-6, K_I=1e-4, K_D=1e-7)
    dt = 1e-5
    tr = run_scenario(sys, cfg, Scenario(0.02, dt, 1.1 * xs, cfg.x_c_star))
    dH = (tr.hamiltonian[2:] - tr.hamiltonian[:-2]) / (2 * dt)
    rates = np.array([power_balance(sys, tr.states[k], tr.controls[k]).stored for k in range(1, len(tr) - 1)])
    assert np.max(np.abs(dH - rates)) < 1e-6 * np.max(np.abs(rates))

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import boost_reference
from pidpbc.apps import BoostParams, build_boost
from pidpbc.controllers import ControllerConfig, MonotoneMap, closed_loop_equilibrium, evaluate
from pidpbc.phs import hamiltonian
from pidpbc.stability import (EPS_GRID, _condition, _pid_blocks, _pid_matrices, boost_leakage_bound, boost_stability_condition,
                              certificate, closed_loop_jacobian, equilibrium_integrator, linearized_spectrum,
                              lyapunov_series, lyapunov_value, monotone_energy, monotone_energy_closed,
                              mplid_certificate, pid_certificate, plid_certificate)

GAINS = dict(K_P=1e-6, K_I=1e-4, K_D=1e-7)
BOX = (np.array([0.0]), np.array([1.0]))


# -- definiteness tests -------------------------------------------------------------

@pytest.mark.parametrize("delta, definite", [(1e-9, True), (-1e-9, False)])
def test_condition_badly_scaled(delta, definite):
    """A spectrum spanning 20 decades: the verdict follows the exact inertia."""
    D = np.diag([1e5, 1e-5])
    A = D @ np.array([[1.0, 1.0 - delta], [1.0 - delta, 1.0]]) @ D
    c = _condition("A", "A > 0", A)
    assert c.holds == definite
    assert c.scaled_margin == pytest.approx(delta, rel=1e-6)


def test_condition_nonpositive_diagonal():
    assert not _condition("A", "A > 0", np.diag([1.0, 0.0])).holds
    assert not _condition("A", "A > 0", np.array([[0.0, 1.0], [1.0, 3.0]])).holds
    assert _condition("A", "A > 0", np.diag([2.0, 1e-30])).holds


# -- PID-PBC -------------------------------------------------------------------------

def test_pid_certificate_boost(boost):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS)
    cert = pid_certificate(sys, cfg, xs, BOX)
    assert cert.satisfied and cert.alpha > 0
    assert EPS_GRID[0] <= cert.epsilon <= EPS_GRID[-1]
    assert all(m > 0 for _, m in cert.margins)
    # identical inputs give identical margins
    again = pid_certificate(sys, cfg, xs, BOX)
    assert again.margins == cert.margins and again.alpha == cert.alpha


def test_pid_certificate_zero_epsilon(boost):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS)
    g, B, Qinv = _pid_blocks(sys, cfg, xs)
    Qe, De = _pid_matrices(sys, cfg, g, B, Qinv, 0.0, np.array([0.5]))
    assert np.linalg.eigvalsh(Qe)[0] > 0
    assert np.linalg.eigvalsh(De)[0] == pytest.approx(0.0, abs=1e-12 * np.abs(De).max())


def test_pid_certificate_survives_integral_rescaling(boost):
    _, sys, _, xs = boost
    for c in (0.1, 10.0):
        cfg = ControllerConfig.build(sys, xs, K_P=1e-6, K_I=c * 1e-4, K_D=1e-7)
        assert pid_certificate(sys, cfg, xs, BOX).satisfied


def test_pid_certificate_rejects_unassignable(boost):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS)
    with pytest.raises(ValueError):
        pid_certificate(sys, cfg, xs * np.array([1.0, 2.0]), BOX)


def test_certificate_dispatch(boost):
    _, sys, _, xs = boost
    with pytest.raises(ValueError):
        certificate(sys, ControllerConfig.build(sys, xs, **GAINS), xs)
    assert certificate(sys, ControllerConfig.build(sys, xs, **GAINS, K_L=5e8), xs).variant == "plid"


# -- leaky PID-PBC -----------------------------------------------------------------

def test_plid_exact_knowledge(boost):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS, K_L=1e-6)
    cert = plid_certificate(sys, cfg, xs)
    assert cert.satisfied
    assert cert.margins[2][1] == pytest.approx(1e-6, rel=1e-12)


def test_plid_boost_leakage_bound():
    """With K_P = K_D = 0 the leakage condition is the scalar boost bound."""
    p = BoostParams()
    xs = boost_reference(p, 380.0)
    act = build_boost(p.with_load(i0_actual=40.0))
    cfg = ControllerConfig.build(build_boost(p, estimated=True), xs, K_P=0.0, K_I=1e-4, K_D=0.0, K_L=5e8)
    x_bar, _ = closed_loop_equilibrium(act, cfg)
    bound = boost_leakage_bound(p.with_load(i0_actual=40.0), xs, x_bar)
    cert = plid_certificate(act, cfg, x_bar)
    assert cert.satisfied and bound < 5e8
    assert cert.margins[2][1] == pytest.approx(5e8 - bound, rel=1e-9)
    weak = ControllerConfig.build(build_boost(p, estimated=True), xs, K_P=0.0, K_I=1e-4, K_D=0.0, K_L=0.5 * bound)
    assert not plid_certificate(act, weak, x_bar).satisfied


def test_boost_stability_condition():
    p = BoostParams()
    xs = boost_reference(p, 380.0)
    assert boost_stability_condition(p.with_load(i0_actual=40.0), xs)
    assert not boost_stability_condition(p.with_load(i0_actual=400.0), xs)


# -- mPLID-PBC -------------------------------------------------------------------------

def _mplid(sys, xs, lam=10.0, K_P=1e-6, K_L=5e8):
    return ControllerConfig.build(sys, xs, K_P=K_P, K_I=1e-4, K_D=1e-7, K_L=K_L,
                                  monotone=dict(u_min=0.1, u_max=0.9, lam=lam))


def test_mplid_ideal_case(boost):
    _, sys, _, xs = boost
    cfg = _mplid(sys, xs)
    cert = mplid_certificate(sys, cfg, xs)
    assert cert.satisfied
    M1, M2 = cert.extra["M1"], cert.extra["M2"]
    assert np.allclose(M1, M2, rtol=1e-12)


def test_mplid_matches_plid_in_linear_region(boost):
    """For a shallow map the conditions equal the PLID ones scaled by the slope."""
    p, _, _, xs = boost
    act = build_boost(p.with_load(i0_actual=30.0))
    est = build_boost(p, estimated=True)
    lam = 1e-3
    m = _mplid(est, xs, lam=lam, K_P=0.0)
    x_bar, x_c_bar = closed_loop_equilibrium(act, m)
    cm = mplid_certificate(act, m, x_bar, x_c_bar=x_c_bar)
    k = cm.extra["M2"][0, 0]
    assert cm.extra["M1"][0, 0] == pytest.approx(k, rel=1e-3)
    assert 0.0 < k <= lam * 0.4
    plain = ControllerConfig.build(est, xs, K_P=0.0, K_I=1e-4, K_D=1e-7, K_L=5e8)
    cp = plid_certificate(act, plain, x_bar)
    assert cm.margins[2][1] == pytest.approx(k * k * cp.margins[2][1], rel=1e-2)


def test_mplid_deep_saturation(boost):
    _, sys, _, xs = boost
    cfg = _mplid(sys, xs, lam=10.0)
    cert = mplid_certificate(sys, cfg, xs, x_c_bar=cfg.x_c_star + 1e5)
    assert not cert.satisfied
    assert cert.failure == "not strongly monotone at the equilibrium"


def test_equilibrium_integrator(boost):
    p, _, est, xs = boost
    act = build_boost(p.with_load(i0_actual=40.0))
    cfg = _mplid(est, xs)
    x_bar, x_c_bar = closed_loop_equilibrium(act, cfg)
    assert equilibrium_integrator(act, cfg, x_bar) == pytest.approx(x_c_bar, rel=1e-8)


# -- linearization -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["pid", "plid", "mplid"])
def test_jacobian_matches_finite_differences(boost, variant):
    p, sys, _, xs = boost
    cfg = {"pid": ControllerConfig.build(sys, xs, **GAINS),
           "plid": ControllerConfig.build(sys, xs, **GAINS, K_L=5e8),
           "mplid": _mplid(sys, xs)}[variant]
    x = xs * np.array([1.1, 0.95])
    xc = cfg.x_c_star * 1.02
    J = closed_loop_jacobian(sys, cfg, x, xc)
    z = np.concatenate([x, xc])
    F = lambda z: np.concatenate(evaluate(cfg, sys, z[:2], z[2:])[:2])  # noqa: E731
    fd = np.empty((3, 3))
    for j in range(3):
        h = 1e-6 * abs(z[j])
        e = np.zeros(3)
        e[j] = h
        fd[:, j] = (F(z + e) - F(z - e)) / (2 * h)
    scale = np.abs(fd).max(axis=1, keepdims=True)
    assert np.all(np.abs(J - fd) <= 1e-6 * scale)


def test_boost_spectrum_stable(boost):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS)
    ev = linearized_spectrum(sys, cfg, xs, cfg.x_c_star)
    assert ev.size == 3 and np.all(ev.real < 0)


# -- Lyapunov functions -----------------------------------------------------------------

def test_lyapunov_zero_at_equilibrium(boost):
    _, sys, _, xs = boost
    for cfg in (ControllerConfig.build(sys, xs, **GAINS), ControllerConfig.build(sys, xs, **GAINS, K_L=5e8),
                _mplid(sys, xs)):
        assert lyapunov_value(cfg.variant, sys, cfg, xs, cfg.x_c_star, xs, cfg.x_c_star) == 0.0


def test_pid_lyapunov_dominates_energy(boost, rng):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS)
    for _ in range(20):
        x = xs * rng.uniform(0.5, 1.5, 2)
        xc = cfg.x_c_star * rng.uniform(0.5, 1.5, 1)
        V = lyapunov_value("pid", sys, cfg, xs, cfg.x_c_star, x, xc)
        assert V >= hamiltonian(sys, x - xs)


def test_monotone_energy_identity_map(boost):
    _, sys, _, xs = boost
    cfg = ControllerConfig.build(sys, xs, **GAINS, K_L=5e8, monotone=MonotoneMap.identity(1))
    d = np.array([250.0])
    assert monotone_energy(cfg, cfg.x_c_star, d) == pytest.approx(0.5 * 1e-4 * 250.0**2, rel=1e-10)


@given(st.floats(-5e4, 5e4))
def test_monotone_energy_closed_form_matches_quadrature(d):
    p = BoostParams()
    xs = boost_reference(p, 380.0)
    cfg = _mplid(build_boost(p), xs)
    dx = np.array([d])
    q = monotone_energy(cfg, cfg.x_c_star, dx)
    c = monotone_energy_closed(cfg, cfg.x_c_star, dx)
    assert c >= -1e-12 * abs(d)
    assert c == pytest.approx(q, rel=1e-8, abs=1e-12 * (1.0 + abs(d)))


def test_lyapunov_series_matches_pointwise(boost, rng):
    _, sys, _, xs = boost
    cfg = _mplid(sys, xs)
    X = xs * rng.uniform(0.8, 1.2, (10, 2))
    XC = cfg.x_c_star * rng.uniform(0.8, 1.2, (10, 1))
    series = lyapunov_series("mplid", sys, cfg, xs, cfg.x_c_star, X, XC)
    single = [lyapunov_value("mplid", sys, cfg, xs, cfg.x_c_star, X[k], XC[k]) for k in range(10)]
    assert np.allclose(series, single, rtol=1e-8)
    with pytest.raises(ValueError):
        lyapunov_series("bogus", sys, cfg, xs, cfg.x_c_star, X, XC)

"""Time the integration kernels compiled with numba against the pure-Python fallback.

Each backend runs in its own process because PIDPBC_DISABLE_NUMBA is read at import.

    python3 benchmarks/bench_kernels.py [--steps N] [--repeat R]
"""
import argparse
import json
import os
import subprocess
import sys
import time


def child(steps: int, repeat: int) -> dict:
    import numpy as np

    from pidpbc import _jit
    from pidpbc.apps import BoostParams, VscParams, build_boost, build_vsc
    from pidpbc.controllers import ControllerConfig
    from pidpbc.equilibria import solve_boost_powerflow, solve_vsc_powerflow
    from pidpbc.sim import Scenario, run_scenario

    p = BoostParams()
    xs = p.state(solve_boost_powerflow(p, 380.0), 380.0)
    boost = build_boost(p)
    cb = ControllerConfig.build(boost, xs, K_P=1e-6, K_I=1e-4, K_D=1e-7, K_L=5e8,
                                monotone=dict(u_min=0.1, u_max=0.9))
    v = VscParams()
    i_d, i_q = v.current_refs(1200e6, 0.0)
    v1, i_T = solve_vsc_powerflow(v, i_d, i_q)
    xv = v.state(i_d, i_q, v1, i_T)
    est = build_vsc(v, estimated=True)
    cv = ControllerConfig.build(est, xv, K_P=1e-3, K_I=1e-3, monotone=dict(u_min=v.u_min, u_max=v.u_max))
    act = build_vsc(v.with_source(0.95 * v.V2_hat))

    dt = 1e-5
    cases = {
        "boost_rk4": lambda n: run_scenario(boost, cb, Scenario(n * dt, dt, 1.1 * xs, cb.x_c_star), decimate=100),
        "vsc_sdirk2": lambda n: run_scenario(act, cv, Scenario(n * dt, dt, xv, cv.x_c_star), sys_est=est,
                                             decimate=100, method="sdirk2"),
    }
    out = {"numba": _jit.NUMBA_ENABLED}
    for name, run in cases.items():
        run(100)  # compile or warm caches
        best = np.inf
        for _ in range(repeat):
            t0 = time.perf_counter()
            run(steps)
            best = min(best, time.perf_counter() - t0)
        out[name] = best
    return out


def spawn(disable: bool, steps: int, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("PIDPBC_DISABLE_NUMBA", None)
    if disable:
        env["PIDPBC_DISABLE_NUMBA"] = "1"
    cmd = [sys.executable, __file__, "--child", "--steps", str(steps), "--repeat", str(repeat)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000, help="integration steps per case")
    ap.add_argument("--repeat", type=int, default=3, help="timed repetitions (best is kept)")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        json.dump(child(args.steps, args.repeat), sys.stdout)
        return
    fast = spawn(False, args.steps, args.repeat)
    slow = spawn(True, args.steps, args.repeat)
    if not fast["numba"]:
        print("numba is not installed; both runs use the Python fallback")
    print(f"{'case':<12} {'numba s':>10} {'python s':>10} {'speedup':>8}  ({args.steps} steps)")
    for name in ("boost_rk4", "vsc_sdirk2"):
        print(f"{name:<12} {fast[name]:>10.4f} {slow[name]:>10.4f} {slow[name] / fast[name]:>8.1f}")


if __name__ == "__main__":
    main()

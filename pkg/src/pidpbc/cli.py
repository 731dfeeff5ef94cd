"""Command-line interface: simulate, certify, equilibrium, sweep."""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli_w

from . import config as C
from .assembly import build_plant, build_scenario, reference_state
from .controllers import closed_loop_equilibrium
from .equilibria import (InfeasibleError, SingularityError, equilibrium_control, gamma, input_feasibility,
                         vsc_gamma)
from .sim import SimulationError, run_scenario, segment_lyapunov
from .stability import boost_leakage_bound, certificate, vsc_exact_margin, vsc_margin

CSV_COLUMNS = {
    "boost": ["i_L_A", "v_C_V", "u", "y"],
    "vsc": ["i_d_A", "i_q_A", "v_1_V", "i_T1_A", "i_T2_A", "i_T3_A", "u_d", "u_q", "y_d", "y_q"],
}


def csv_header(kind: str, lyapunov: bool) -> list[str]:
    return ["time_s", *CSV_COLUMNS[kind], "hamiltonian_J"] + (["lyapunov_J"] if lyapunov else [])


def write_trajectory_csv(stream, kind: str, params, traj, lyapunov=None):
    """One row per sample; energy variables are converted to currents and voltages."""
    stream.write(f"# format_version = {C.FORMAT_VERSION}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(csv_header(kind, lyapunov is not None))
    Z = params.coenergy(traj.states)
    for k in range(traj.times.size):
        row = [traj.times[k], *Z[k], *traj.controls[k], *traj.outputs[k], traj.hamiltonian[k]]
        if lyapunov is not None:
            row.append(lyapunov[k])
        w.writerow([repr(float(v)) for v in row])


def read_trajectory_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and data of a trajectory CSV; checks the format version."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# format_version = {C.FORMAT_VERSION}":
            raise C.ConfigError(f"unsupported trajectory header {first!r}", 1, 1, str(path))
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def _simulate(sc: C.ScenarioConfig):
    plant, scenario = build_scenario(sc)
    t0 = time.perf_counter()
    traj = run_scenario(plant.actual, plant.controller, scenario, sys_est=plant.estimated,
                        decimate=sc.simulation.decimate, allow_failure=True, method=sc.simulation.method)
    elapsed = time.perf_counter() - t0
    lyap = segment_lyapunov(traj) if sc.simulation.lyapunov and traj.status == "ok" else None
    return plant, traj, lyap, elapsed


def _summary(sc, plant, traj, elapsed) -> str:
    out = io.StringIO()
    out.write(f"scenario {sc.name}: {traj.status}, {traj.times[-1]:.6g} s simulated in {elapsed:.2f} s\n")
    names = CSV_COLUMNS[sc.system.kind]
    n = plant.actual.n
    for i, seg in enumerate(traj.segments):
        if seg.stop <= seg.start:
            continue
        z = plant.params.coenergy(traj.states[seg.stop - 1])
        U = traj.controls[seg.start:seg.stop]
        state = ", ".join(f"{nm}={v:.6g}" for nm, v in zip(names[:n], z))
        out.write(f"  segment {i} [{seg.t_start:.6g}, {seg.t_end:.6g}) s: end {state}; "
                  f"u in [{U.min():.6g}, {U.max():.6g}]\n")
    return out.getvalue()


def _sweep_variants(sc: C.ScenarioConfig, param=None, values=None):
    if param is None:
        if sc.sweep is None:
            return [(None, sc)]
        param, values = sc.sweep.parameter, sc.sweep.values
    return [((param, v), C.with_gain(sc, param, v)) for v in values]


def _variant_path(out: Path, tag) -> Path:
    if tag is None:
        return out
    return out.with_name(f"{out.stem}_{tag[0]}={tag[1]:g}{out.suffix}")


def _run_to_csv(job):
    sc, path = job
    plant, traj, lyap, elapsed = _simulate(sc)
    with open(path, "w", newline="") as fh:
        write_trajectory_csv(fh, sc.system.kind, plant.params, traj, lyap)
    return _summary(sc, plant, traj, elapsed), traj.status


def cmd_simulate(args) -> int:
    sc = C.load_scenario(args.scenario)
    sc = C.with_simulation(sc, dt=args.dt, duration=args.duration, decimate=args.decimate)
    variants = _sweep_variants(sc) if not args.no_sweep else [(None, sc)]
    out = Path(args.out or f"{sc.name}.csv")
    if not out.suffix:
        out = out.with_suffix(".csv")
    jobs = [(v, _variant_path(out, tag)) for tag, v in variants]
    if len(jobs) > 1 and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            results = list(ex.map(_run_to_csv, jobs))
    else:
        results = [_run_to_csv(j) for j in jobs]
    ok = True
    for (tag, _), (_, path), (text, status) in zip(variants, jobs, results):
        if tag is not None:
            print(f"{tag[0]} = {tag[1]:g}")
        print(text, end="")
        print(f"  wrote {path}")
        ok &= status == "ok"
    return 0 if ok else 1


def _arr(a):
    return [float(v) for v in np.ravel(a)]


def certificate_report(sysc: C.SystemConfig) -> dict:
    """Structured certificate report for the configured plant and controller."""
    plant = build_plant(sysc)
    cfg = plant.controller
    x_bar, x_c_bar = closed_loop_equilibrium(plant.actual, cfg)
    cert = certificate(plant.actual, cfg, x_bar, plant.params.u_bounds)
    rep = {
        "format_version": C.FORMAT_VERSION,
        "system": sysc.kind,
        "variant": cert.variant,
        "satisfied": bool(cert.satisfied),
        "x_star": _arr(plant.params.coenergy(plant.x_star)),
        "x_bar": _arr(plant.params.coenergy(x_bar)),
        "x_c_bar": _arr(x_c_bar),
    }
    if cert.variant == "pid":
        rep["epsilon"] = float(cert.epsilon)
        rep["alpha_per_s"] = float(cert.alpha)
    elif cert.variant == "plid":
        rep["alpha_per_s"] = float(cert.alpha)
    if cert.failure:
        rep["failure"] = cert.failure
    rep["conditions"] = [{"name": c.name, "statement": c.statement, "margin": float(c.margin),
                          "scale": float(c.scale), **({} if c.scaled_margin is None else {"scaled_margin": c.scaled_margin}),
                          "holds": bool(c.holds)} for c in cert.conditions]
    app = {}
    if sysc.kind == "boost" and cfg.K_L is not None:
        bound = boost_leakage_bound(plant.params, plant.x_star, x_bar)
        app["leakage_bound"] = bound
        app["leakage_gain"] = float(np.min(np.diag(cfg.K_L)))
        app["leakage_bound_holds"] = bool(app["leakage_gain"] > bound)
    if sysc.kind == "vsc":
        app["voltage_margin_V"] = vsc_margin(plant.params, plant.x_star)
        app["exact_voltage_margin_V"] = vsc_exact_margin(plant.params, plant.x_star)
        app["voltage_underestimate_V"] = float(plant.params.V2_hat - plant.params.V2_actual)
    if app:
        rep["application"] = app
    return rep


def cmd_certify(args) -> int:
    rep = certificate_report(C.load_system(args.system))
    text = tomli_w.dumps(rep)
    _emit(text, args.out)
    return 0 if rep["satisfied"] else 1


def equilibrium_report(sysc: C.SystemConfig) -> dict:
    """Completed reference, equilibrium control and robustness scalars."""
    plant = build_plant(sysc)
    p = plant.params
    est = plant.estimated
    u_star = equilibrium_control(est, plant.x_star)
    lo, hi = p.u_bounds
    rep = {
        "format_version": C.FORMAT_VERSION,
        "system": sysc.kind,
        "x_star": _arr(p.coenergy(plant.x_star)),
        "u_star": _arr(u_star),
        "u_star_within_bounds": bool(np.all((u_star > lo) & (u_star < hi))),
    }
    if sysc.kind == "boost":
        r = gamma(plant.actual, plant.x_star)
        rep["x_bar"] = _arr(p.coenergy(r.gamma * plant.x_star))
        rep["u_bar_within_bounds"] = bool(input_feasibility(plant.actual, r.gamma, plant.x_star, lo, hi))
    else:
        r = vsc_gamma(p, plant.x_star)
        z = p.coenergy(plant.x_star)
        rep["x_bar_terminal"] = _arr(r.gamma * z[:3])
        rep["delta_x_approx"] = float(r.delta_x_approx)
        rep["voltage_margin_V"] = vsc_margin(p, plant.x_star)
    rep.update({"p_loss_W": float(r.p_loss), "p_net_W": float(r.p_net), "gamma": float(r.gamma),
                "delta_x": float(r.delta_x), "gamma_positive": bool(r.stable)})
    return rep


def cmd_equilibrium(args) -> int:
    sysc = C.load_system(args.system)
    ref = {}
    if args.vref is not None:
        ref = {"v_C": args.vref}
    elif args.idref is not None or args.iqref is not None:
        ref = {"i_d": args.idref or 0.0, "i_q": args.iqref or 0.0}
    elif args.pref is not None or args.qref is not None:
        ref = {"P": (args.pref or 0.0) * 1e6, "Q": (args.qref or 0.0) * 1e6}
    if ref:
        if sysc.kind == "boost" and "v_C" not in ref:
            raise C.ConfigError("boost reference is set with --vref")
        if sysc.kind == "vsc" and "v_C" in ref:
            raise C.ConfigError("vsc reference is set with --idref/--iqref or --pref/--qref")
        sysc = replace(sysc, reference=ref)
    reference_state(sysc.kind, sysc.params, sysc.reference)
    rep = equilibrium_report(sysc)
    _emit(tomli_w.dumps(rep), args.out)
    return 0


def _sweep_job(job):
    sc, x0, tag = job
    plant, scenario = build_scenario(sc)
    if x0 is not None:
        scenario = replace(scenario, x0=x0)
    t0 = time.perf_counter()
    traj = run_scenario(plant.actual, plant.controller, scenario, sys_est=plant.estimated,
                        decimate=sc.simulation.decimate, allow_failure=True, method=sc.simulation.method)
    elapsed = time.perf_counter() - t0
    z = plant.params.coenergy(traj.states[-1])
    return {"case": tag, "status": traj.status, "t_end_s": float(traj.times[-1]), "runtime_s": elapsed,
            "u_min": float(traj.controls.min()), "u_max": float(traj.controls.max()),
            **{f"end_{nm}": float(v) for nm, v in zip(CSV_COLUMNS[sc.system.kind], z)}}


def cmd_sweep(args) -> int:
    sc = C.load_scenario(args.scenario)
    sc = C.with_simulation(sc, dt=args.dt, duration=args.duration, decimate=args.decimate)
    jobs = []
    if args.random_initial:
        rng = np.random.default_rng(args.seed)
        plant, scenario = build_scenario(sc)
        for k in range(args.random_initial):
            x0 = scenario.x0 * (1.0 + args.spread * rng.uniform(-1.0, 1.0, scenario.x0.size))
            jobs.append((sc, x0, f"initial_{k}"))
    else:
        values = [float(v) for v in args.values] if args.values else None
        if args.param is not None and values is None:
            raise C.ConfigError("--param needs --values")
        for tag, v in _sweep_variants(sc, args.param, values):
            jobs.append((v, None, "base" if tag is None else f"{tag[0]}={tag[1]:g}"))
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            rows = list(ex.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    buf = io.StringIO()
    buf.write(f"# format_version = {C.FORMAT_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _emit(buf.getvalue(), args.out)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _add_sim_flags(p):
    p.add_argument("--dt", type=float, help="integration step in seconds")
    p.add_argument("--duration", type=float, help="simulated time in seconds")
    p.add_argument("--decimate", type=int, help="keep every n-th step")
    p.add_argument("--workers", type=int, default=1, help="parallel processes")
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pidpbc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario file and write the trajectory CSV")
    p.add_argument("scenario")
    p.add_argument("--no-sweep", action="store_true", help="ignore the [sweep] table")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("certify", help="evaluate the stability certificate of a system file")
    p.add_argument("system")
    p.add_argument("--out")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("equilibrium", help="complete a reference and report gamma and delta_x")
    p.add_argument("system")
    p.add_argument("--vref", type=float, help="boost capacitor voltage reference, V")
    p.add_argument("--idref", type=float, help="VSC d-axis current reference, A")
    p.add_argument("--iqref", type=float, help="VSC q-axis current reference, A")
    p.add_argument("--pref", type=float, help="VSC active power reference, MW")
    p.add_argument("--qref", type=float, help="VSC reactive power reference, Mvar")
    p.add_argument("--out")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("sweep", help="run scenario variants in parallel and tabulate the results")
    p.add_argument("scenario")
    p.add_argument("--param", choices=C.GAIN_KEYS, help="gain to vary (default: the file's [sweep])")
    p.add_argument("--values", nargs="+", help="gain values")
    p.add_argument("--random-initial", type=int, default=0, metavar="N",
                   help="instead, run N random initial conditions around the initial state")
    p.add_argument("--spread", type=float, default=0.2, help="relative spread of random initial states")
    p.add_argument("--seed", type=int, default=0, help="seed for random initial states")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleError, SingularityError) as exc:
        print(f"error: infeasible equilibrium: {exc}", file=sys.stderr)
        return 3
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

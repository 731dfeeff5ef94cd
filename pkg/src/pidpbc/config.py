"""System and scenario files.

Files are TOML with a top-level ``format_version``. Physical quantities
carry their unit in the key name (``L_mH = 1.12``, ``V_d_kV = 310.27``);
any unit of the right dimension is accepted and values are converted to
SI on load. Serialization writes SI base units, so parsing a serialized
configuration reproduces every numeric field exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .apps import BoostParams, VscParams

FORMAT_VERSION = 1

UNITS = {
    "inductance": {"H": 1.0, "mH": 1e-3, "uH": 1e-6},
    "capacitance": {"F": 1.0, "mF": 1e-3, "uF": 1e-6},
    "resistance": {"Ohm": 1.0, "mOhm": 1e-3, "kOhm": 1e3},
    "conductance": {"S": 1.0, "mS": 1e-3, "uS": 1e-6},
    "voltage": {"V": 1.0, "kV": 1e3},
    "current": {"A": 1.0, "kA": 1e3},
    "frequency": {"Hz": 1.0},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6},
    "power": {"W": 1.0, "kW": 1e3, "MW": 1e6},
    "reactive": {"var": 1.0, "kvar": 1e3, "Mvar": 1e6},
}
BASE_UNIT = {dim: next(u for u, f in table.items() if f == 1.0) for dim, table in UNITS.items()}

# field name -> dimension (None: dimensionless, written without suffix)
BOOST_FIELDS = {
    "L": "inductance", "C": "capacitance", "R": "resistance", "G": "conductance", "v0": "voltage",
    "G0_hat": "conductance", "G0_actual": "conductance", "i0_hat": "current", "i0_actual": "current",
    "u_min": None, "u_max": None,
}
VSC_FIELDS = {
    "L": "inductance", "C": "capacitance", "R": "resistance", "G": "conductance", "f": "frequency",
    "V_d": "voltage", "V2_hat": "voltage", "V2_actual": "voltage", "R_T": "resistance",
    "L_T": "inductance", "u_min": None, "u_max": None,
}
SYSTEM_FIELDS = {"boost": BOOST_FIELDS, "vsc": VSC_FIELDS}
REFERENCE_FIELDS = {
    "boost": {"v_C": "voltage"},
    "vsc": {"i_d": "current", "i_q": "current", "P": "power", "Q": "reactive"},
}
GAIN_KEYS = ("K_P", "K_I", "K_D", "K_L")
METHODS = ("rk4", "sdirk2")
INITIAL_MODES = ("reference", "equilibrium")


class ConfigError(ValueError):
    """Malformed configuration; carries the 1-based line and column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 path: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.path = path
        super().__init__(str(self))

    def __str__(self):
        where = self.path or "<config>"
        if self.line is not None:
            where += f":{self.line}:{self.column or 1}"
        return f"{where}: {self.message}"


# -- locating keys for error messages ---------------------------------------

_HEADER = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-]+)\s*\]\]?")
_KEY = re.compile(r"^(\s*)([A-Za-z0-9_\-]+)\s*=")


class _Locator:
    """Maps ``(table, index, key)`` to the line/column of its definition."""

    def __init__(self, text: str):
        self.keys = {}
        self.tables = {}
        table, index, counts = "", None, {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            h = _HEADER.match(line)
            if h:
                table = h.group(2)
                if h.group(1) == "[[":
                    index = counts.get(table, 0)
                    counts[table] = index + 1
                else:
                    index = None
                self.tables.setdefault((table, index), (lineno, line.index(h.group(1)) + 1))
                continue
            k = _KEY.match(line)
            if k:
                self.keys.setdefault((table, index, k.group(2)), (lineno, len(k.group(1)) + 1))

    def find(self, table: str, key: str | None = None, index: int | None = None):
        if key is not None and (table, index, key) in self.keys:
            return self.keys[(table, index, key)]
        return self.tables.get((table, index), (None, None))


class _Reader:
    """Pops keys from one table, raising located errors."""

    def __init__(self, data: dict, table: str, loc: _Locator | None, path: str | None,
                 index: int | None = None):
        if not isinstance(data, dict):
            line, col = loc.find(table, None, index) if loc else (None, None)
            raise ConfigError(f"[{table}] must be a table", line, col, path)
        self.data = dict(data)
        self.table = table
        self.loc = loc
        self.path = path
        self.index = index

    def error(self, message: str, key: str | None = None) -> ConfigError:
        line, col = self.loc.find(self.table, key, self.index) if self.loc else (None, None)
        label = f"[{self.table}]" if self.table else "top level"
        return ConfigError(f"{label}: {message}", line, col, self.path)

    def has(self, key: str) -> bool:
        return key in self.data

    def pop(self, key: str, default=...):
        if key not in self.data:
            if default is ...:
                raise self.error(f"missing key {key!r}")
            return default
        return self.data.pop(key)

    def number(self, key: str, default=...) -> float:
        if default is not ... and key not in self.data:
            return default
        return self._as_number(key, self.pop(key))

    def _as_number(self, key, val) -> float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise self.error(f"{key!r} must be a number", key)
        return float(val)

    def gain(self, key: str, default=...):
        if default is not ... and key not in self.data:
            return default
        val = self.pop(key)
        if isinstance(val, list):
            return tuple(self._as_number(key, v) for v in val)
        return self._as_number(key, val)

    def quantity(self, name: str, dim: str | None, required: bool = True):
        """Value of ``name`` in SI, from ``name_<unit>``; lists are converted elementwise."""
        if dim is None:
            if name in self.data:
                return self._convert(name, self.pop(name), 1.0)
            if required:
                raise self.error(f"missing key {name!r}")
            return None
        hits = [(k, UNITS[dim][k[len(name) + 1:]]) for k in self.data
                if k.startswith(name + "_") and k[len(name) + 1:] in UNITS[dim]]
        if len(hits) > 1:
            raise self.error(f"{name!r} given more than once ({', '.join(k for k, _ in hits)})", hits[1][0])
        if not hits:
            if name in self.data:
                units = ", ".join(UNITS[dim])
                raise self.error(f"{name!r} needs a unit suffix, one of: {units}", name)
            if required:
                raise self.error(f"missing key {name}_<unit> (units: {', '.join(UNITS[dim])})")
            return None
        key, factor = hits[0]
        return self._convert(key, self.pop(key), factor)

    def _convert(self, key, val, factor):
        if isinstance(val, list):
            return tuple(self._as_number(key, v) * factor for v in val)
        return self._as_number(key, val) * factor

    def string(self, key: str, choices=None, default=...) -> str:
        val = self.pop(key, default)
        if not isinstance(val, str):
            raise self.error(f"{key!r} must be a string", key)
        if choices is not None and val not in choices:
            raise self.error(f"{key!r} must be one of {', '.join(choices)}; got {val!r}", key)
        return val

    def boolean(self, key: str, default=...) -> bool:
        val = self.pop(key, default)
        if not isinstance(val, bool):
            raise self.error(f"{key!r} must be true or false", key)
        return val

    def finish(self):
        if self.data:
            key = next(iter(self.data))
            raise self.error(f"unknown key {key!r}", key)


# -- configuration objects --------------------------------------------------

@dataclass(frozen=True)
class ControllerSpec:
    """Gains (scalars or per-channel tuples) and the optional saturation map."""

    K_P: float | tuple = 0.0
    K_I: float | tuple = 1.0
    K_D: float | tuple = 0.0
    K_L: float | tuple | None = None
    monotone: bool = False
    lam: float = 10.0


@dataclass(frozen=True)
class SystemConfig:
    kind: str
    params: BoostParams | VscParams
    controller: ControllerSpec
    reference: dict


@dataclass(frozen=True)
class SimulationSpec:
    duration: float
    dt: float = 1e-5
    decimate: int = 1
    method: str = "rk4"
    initial: str = "reference"
    lyapunov: bool = False


@dataclass(frozen=True)
class EventSpec:
    """Changes applied at ``time``: reference components, plant parameters, gains."""

    time: float
    reference: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)
    label: str = ""


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    system: SystemConfig
    simulation: SimulationSpec
    events: tuple = ()
    sweep: SweepSpec | None = None


def _params_cls(kind):
    return BoostParams if kind == "boost" else VscParams


def _param_attr(kind: str, name: str) -> str:
    return "f_hz" if (kind, name) == ("vsc", "f") else name


def _read_params(r: _Reader, kind: str):
    kw = {}
    for name, dim in SYSTEM_FIELDS[kind].items():
        val = r.quantity(name, dim, required=False)
        if val is not None:
            kw[_param_attr(kind, name)] = val
    try:
        return _params_cls(kind)(**kw)
    except (TypeError, ValueError) as exc:
        raise r.error(str(exc)) from None


def _read_controller(r: _Reader) -> ControllerSpec:
    spec = ControllerSpec(
        K_P=r.gain("K_P", 0.0),
        K_I=r.gain("K_I"),
        K_D=r.gain("K_D", 0.0),
        K_L=r.gain("K_L", None),
        monotone=r.boolean("monotone", False),
        lam=r.number("lambda", 10.0),
    )
    r.finish()
    return spec


def _read_reference(r: _Reader, kind: str) -> dict:
    ref = {}
    for name, dim in REFERENCE_FIELDS[kind].items():
        val = r.quantity(name, dim, required=False)
        if val is not None:
            ref[name] = val
    r.finish()
    _check_reference(ref, kind, r)
    return ref


def _check_reference(ref: dict, kind: str, r: _Reader, partial: bool = False):
    keys = set(ref)
    if kind == "boost":
        ok = keys == {"v_C"} or (partial and not keys)
    else:
        ok = keys in ({"i_d", "i_q"}, {"P", "Q"}) or (partial and not keys)
    if not ok:
        need = "v_C_<unit>" if kind == "boost" else "either i_d_<unit> and i_q_<unit> or P_<unit> and Q_<unit>"
        raise r.error(f"reference needs {need}")


def _load_text(source: str, path):
    try:
        data = tomli.loads(source)
    except tomli.TOMLDecodeError as exc:
        msg = exc.msg if hasattr(exc, "msg") else str(exc)
        raise ConfigError(msg, getattr(exc, "lineno", None), getattr(exc, "colno", None), path) from None
    return data, _Locator(source), path


def _check_version(r: _Reader):
    if not r.has("format_version"):
        raise r.error("missing key 'format_version'")
    ver = r.pop("format_version")
    if ver != FORMAT_VERSION:
        raise r.error(f"unsupported format_version {ver!r} (expected {FORMAT_VERSION})", "format_version")


def _read_system_tables(top: _Reader, loc, path) -> SystemConfig:
    sysr = _Reader(top.pop("system"), "system", loc, path)
    kind = sysr.string("type", choices=tuple(SYSTEM_FIELDS))
    params = _read_params(sysr, kind)
    sysr.finish()
    ctrl = _read_controller(_Reader(top.pop("controller"), "controller", loc, path))
    ref = _read_reference(_Reader(top.pop("reference"), "reference", loc, path), kind)
    return SystemConfig(kind, params, ctrl, ref)


def parse_system(source, path: str | None = None) -> SystemConfig:
    """Parse the text of a system file (plant, controller and reference)."""
    data, loc, path = _load_text(source, path)
    top = _Reader(data, "", loc, path)
    _check_version(top)
    cfg = _read_system_tables(top, loc, path)
    top.finish()
    return cfg


EVENT_PARAMS = {
    "boost": {"i0_actual": "current", "G0_actual": "conductance"},
    "vsc": {"V2_actual": "voltage"},
}


def _read_event(r: _Reader, sysc: SystemConfig) -> EventSpec:
    time = r.quantity("time", "time")
    label = r.string("label", default="")
    ref = {}
    for name, dim in REFERENCE_FIELDS[sysc.kind].items():
        val = r.quantity(name + "_ref", dim, required=False)
        if val is not None:
            ref[name] = val
    _check_reference(ref, sysc.kind, r, partial=True)
    params = {}
    for name, dim in EVENT_PARAMS[sysc.kind].items():
        val = r.quantity(name, dim, required=False)
        if val is not None:
            params[name] = val
    if sysc.kind == "vsc" and r.has("V2_actual_pct"):
        if "V2_actual" in params:
            raise r.error("give V2_actual either in volts or in percent", "V2_actual_pct")
        params["V2_actual"] = r.number("V2_actual_pct") / 100.0 * sysc.params.V2_hat
    gains = {}
    for key in GAIN_KEYS:
        if r.has(key):
            gains[key] = r.gain(key)
    r.finish()
    if not (ref or params or gains):
        raise r.error("event changes nothing")
    return EventSpec(time, ref, params, gains, label)


def parse_scenario(source, path: str | None = None) -> ScenarioConfig:
    """Parse the text of a scenario file: a system file plus ``[simulation]``, ``[[events]]`` and ``[sweep]``."""
    data, loc, path = _load_text(source, path)
    top = _Reader(data, "", loc, path)
    _check_version(top)
    name = top.string("name", default=Path(path).stem if path else "scenario")
    sysc = _read_system_tables(top, loc, path)
    simr = _Reader(top.pop("simulation"), "simulation", loc, path)
    sim = SimulationSpec(
        duration=simr.quantity("duration", "time"),
        dt=simr.quantity("dt", "time", required=False) or 1e-5,
        decimate=int(simr.number("decimate", 1)),
        method=simr.string("method", METHODS, "rk4"),
        initial=simr.string("initial", INITIAL_MODES, "reference"),
        lyapunov=simr.boolean("lyapunov", False),
    )
    simr.finish()
    if sim.duration <= 0 or sim.dt <= 0 or sim.decimate < 1:
        raise simr.error("need duration > 0, dt > 0 and decimate >= 1")
    raw = top.pop("events", [])
    if not isinstance(raw, list):
        raise top.error("events must be an array of tables ([[events]])", "events")
    events = tuple(_read_event(_Reader(ev, "events", loc, path, i), sysc) for i, ev in enumerate(raw))
    times = [ev.time for ev in events]
    for i, (a, b) in enumerate(zip(times, times[1:])):
        if b <= a:
            line, col = loc.find("events", "time_s", i + 1)
            raise ConfigError("event times must be strictly increasing", line, col, path)
    sweep = None
    if top.has("sweep"):
        swr = _Reader(top.pop("sweep"), "sweep", loc, path)
        par = swr.string("parameter", GAIN_KEYS)
        vals = swr.pop("values")
        if not isinstance(vals, list) or not vals:
            raise swr.error("'values' must be a non-empty array", "values")
        sweep = SweepSpec(par, tuple(swr._as_number("values", v) for v in vals))
        swr.finish()
    top.finish()
    return ScenarioConfig(name, sysc, sim, events, sweep)


# -- serialization ----------------------------------------------------------

def _si_key(name, dim):
    return name if dim is None else f"{name}_{BASE_UNIT[dim]}"


def _plain(val):
    if isinstance(val, (tuple, list, np.ndarray)):
        return [float(v) for v in val]
    return float(val)


def _system_tables(cfg: SystemConfig) -> dict:
    p = cfg.params
    sysd = {"type": cfg.kind}
    for name, dim in SYSTEM_FIELDS[cfg.kind].items():
        sysd[_si_key(name, dim)] = _plain(getattr(p, _param_attr(cfg.kind, name)))
    c = cfg.controller
    ctrl = {"K_P": _plain(c.K_P), "K_I": _plain(c.K_I), "K_D": _plain(c.K_D)}
    if c.K_L is not None:
        ctrl["K_L"] = _plain(c.K_L)
    ctrl["monotone"] = bool(c.monotone)
    ctrl["lambda"] = float(c.lam)
    ref = {_si_key(k, REFERENCE_FIELDS[cfg.kind][k]): float(v) for k, v in cfg.reference.items()}
    return {"system": sysd, "controller": ctrl, "reference": ref}


def dump_system(cfg: SystemConfig) -> str:
    return tomli_w.dumps({"format_version": FORMAT_VERSION, **_system_tables(cfg)})


def dump_scenario(sc: ScenarioConfig) -> str:
    kind = sc.system.kind
    s = sc.simulation
    doc = {"format_version": FORMAT_VERSION, "name": sc.name, **_system_tables(sc.system)}
    doc["simulation"] = {"duration_s": float(s.duration), "dt_s": float(s.dt), "decimate": int(s.decimate),
                         "method": s.method, "initial": s.initial, "lyapunov": bool(s.lyapunov)}
    evs = []
    for ev in sc.events:
        d = {"time_s": float(ev.time)}
        if ev.label:
            d["label"] = ev.label
        for k, v in ev.reference.items():
            d[_si_key(k + "_ref", REFERENCE_FIELDS[kind][k])] = float(v)
        for k, v in ev.params.items():
            d[_si_key(k, EVENT_PARAMS[kind][k])] = float(v)
        for k, v in ev.gains.items():
            d[k] = _plain(v)
        evs.append(d)
    if evs:
        doc["events"] = evs
    if sc.sweep is not None:
        doc["sweep"] = {"parameter": sc.sweep.parameter, "values": [float(v) for v in sc.sweep.values]}
    return tomli_w.dumps(doc)


def load_system(path) -> SystemConfig:
    return parse_system(Path(path).read_text(), str(path))


def load_scenario(path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text(), str(path))


def with_simulation(sc: ScenarioConfig, **overrides) -> ScenarioConfig:
    """Copy with ``[simulation]`` fields replaced (``None`` values are ignored)."""
    kw = {k: v for k, v in overrides.items() if v is not None}
    if not kw:
        return sc
    for key in ("duration", "dt", "decimate"):
        if key in kw and not kw[key] > 0:
            raise ConfigError(f"{key} must be positive, got {kw[key]}", path=sc.name)
    out = replace(sc, simulation=replace(sc.simulation, **kw))
    if "duration" in kw:
        # a shortened run drops the events it no longer reaches
        out = replace(out, events=tuple(e for e in sc.events if e.time <= kw["duration"]))
    return out


def with_gain(sc: ScenarioConfig, name: str, value) -> ScenarioConfig:
    """Copy with one controller gain replaced (``K_L = 0`` removes the leakage)."""
    if name not in GAIN_KEYS:
        raise ValueError(f"unknown gain {name!r}")
    if name == "K_L" and np.all(np.asarray(value) == 0.0):
        value = None
    ctrl = replace(sc.system.controller, **{name: value})
    return replace(sc, system=replace(sc.system, controller=ctrl))


def params_fields(params) -> dict:
    """Parameter values keyed by attribute name (for equality checks)."""
    return {f.name: getattr(params, f.name) for f in fields(params) if f.init}

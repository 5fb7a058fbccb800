"""Strict TOML configuration.

Physical values carry their unit in the key name.  Scenarios and
controllers are named tables (``[inflow.gust]``, ``[controller.mpc]``).
Unknown keys, wrong types and invalid values are reported with the key
name and the line it appears on.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import TowerParams, TurbineParams
from .sim import ControllerSpec, InflowSpec, SimConfig, make_plant


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and line when known."""


# toml key -> (dataclass field, accepted python types)
_NUM = (int, float)
TURBINE_KEYS = {
    "rotor_radius_m": ("rotor_radius", _NUM),
    "inertia_kg_m2": ("inertia", _NUM),
    "air_density_kg_m3": ("air_density", _NUM),
    "rated_speed_rad_s": ("rated_speed", _NUM),
    "rated_wind_mps": ("rated_wind", _NUM),
    "rated_gen_torque_Nm": ("rated_gen_torque", _NUM),
    "pitch_min_rad": ("pitch_min", _NUM),
    "pitch_max_rad": ("pitch_max", _NUM),
    "pitch_rate_limit_rad_s": ("pitch_rate_limit", _NUM),
    "actuator_tau_s": ("actuator_tau", _NUM),
    "cp_coeffs": ("cp_coeffs", (list,)),
    "design_wind_mps": ("design_wind", _NUM),
    "tower_enabled": ("tower_enabled", (bool,)),
    "tower_modal_mass_kg": ("modal_mass", _NUM),
    "tower_nat_freq_rad_s": ("nat_freq", _NUM),
    "tower_damping_ratio": ("damping_ratio", _NUM),
    "tower_thrust_coeff_scale": ("thrust_coeff_scale", _NUM),
}
INFLOW_KEYS = {
    "kind": ("kind", (str,)),
    "duration_s": ("duration", _NUM),
    "v0_mps": ("v0", _NUM),
    "v1_mps": ("v1", _NUM),
    "t_step_s": ("t_step", _NUM),
    "amplitude_mps": ("amplitude", _NUM),
    "period_s": ("period", _NUM),
    "t_start_s": ("t_start", _NUM),
    "v_mean_mps": ("v_mean", _NUM),
    "turbulence_intensity": ("turbulence_intensity", _NUM),
    "length_scale_m": ("length_scale", _NUM),
    "event_time_s": ("event_time", _NUM),
    "preview_noise_std_mps": ("preview_noise_std", _NUM),
}
CONTROLLER_KEYS = {
    "type": ("type", (str,)),
    "Np": ("Np", (int,)),
    "q_speed": ("q_speed", _NUM),
    "q_pitch": ("q_pitch", _NUM),
    "q_integral": ("q_integral", _NUM),
    "Ru": ("Ru", _NUM),
    "rate_limit": ("rate_limit", (bool,)),
    "constrain_position": ("constrain_position", (bool,)),
    "constrain_rate": ("constrain_rate", (bool,)),
    "deadline_budget_us": ("deadline_budget_us", _NUM),
    "iter_cost_us": ("iter_cost_us", _NUM),
    "max_iter": ("max_iter", (int,)),
    "max_fallbacks": ("max_fallbacks", (int,)),
    "kp_s": ("kp", _NUM),
    "ki": ("ki", _NUM),
    "beta_k_rad": ("beta_k", _NUM),
}
SIM_KEYS = {
    "dt_plant_s": ("dt_plant", _NUM),
    "ctrl_period_s": ("ctrl_period", _NUM),
    "repeats": ("repeats", (int,)),
    "seed_base": ("seed_base", (int,)),
    "out_dir": ("out_dir", (str,)),
}
HIL_KEYS = {
    "host": ("host", (str,)),
    "port": ("port", (int,)),
    "deadline_us": ("deadline_us", _NUM),
    "max_misses": ("max_misses", (int,)),
    "mode": ("mode", (str,)),
}


@dataclass
class SimSettings:
    dt_plant: float = 0.001  # s
    ctrl_period: float = 0.01  # s
    repeats: int = 10
    seed_base: int = 0
    out_dir: str = "results"


@dataclass
class HilSettings:
    host: str = "127.0.0.1"
    port: int = 5757
    deadline_us: float = 10000.0
    max_misses: int = 5
    mode: str = "lockstep"


@dataclass
class Config:
    turbine: TurbineParams = field(default_factory=TurbineParams)
    design_wind: float = 12.0  # m/s
    sim: SimSettings = field(default_factory=SimSettings)
    inflows: dict = field(default_factory=dict)  # name -> InflowSpec
    controllers: dict = field(default_factory=dict)  # name -> ControllerSpec
    hil: HilSettings = field(default_factory=HilSettings)

    def plant(self):
        return make_plant(self.turbine, self.design_wind, Ts=self.sim.ctrl_period)

    def scenario(self, name=None):
        return _pick(self.inflows, name, "inflow")

    def controller(self, name=None):
        return _pick(self.controllers, name, "controller")

    def sim_config(self, scenario=None, controller=None, seed=None):
        return SimConfig(inflow=self.scenario(scenario), controller=self.controller(controller),
                         dt_plant=self.sim.dt_plant, ctrl_period=self.sim.ctrl_period,
                         repeats=self.sim.repeats,
                         seed=self.sim.seed_base if seed is None else seed)


def _pick(table, name, what):
    if not table:
        raise ConfigError(f"no [{what}.*] section defined")
    if name is None:
        return next(iter(table.values()))
    if name not in table:
        raise ConfigError(f"unknown {what} {name!r}; defined: {', '.join(table)}")
    return table[name]


def default_config():
    """Built-in defaults: gust and turbulence scenarios, the four controllers."""
    return Config(
        inflows={"gust": InflowSpec(name="gust", kind="gust"),
                 "turbulence": InflowSpec(name="turbulence", kind="turbulence", duration=20.0)},
        controllers={"pi": ControllerSpec(name="pi", type="pi", Np=1),
                     "lqr": ControllerSpec(name="lqr", type="lqr"),
                     "lqr_preview": ControllerSpec(name="lqr_preview", type="lqr_preview"),
                     "mpc": ControllerSpec(name="mpc", type="mpc")})


def _as_table(obj, schema):
    out = {}
    for key, (name, _) in schema.items():
        value = getattr(obj, name, None)
        if value is not None:
            out[key] = list(value) if isinstance(value, tuple) else value
    return out


def default_data():
    """The built-in defaults as a TOML-shaped dict, so overrides can merge into them."""
    cfg = default_config()
    turbine = _as_table(cfg.turbine, TURBINE_KEYS)
    turbine["design_wind_mps"] = cfg.design_wind
    return {"turbine": turbine, "sim": _as_table(cfg.sim, SIM_KEYS),
            "inflow": {n: _as_table(s, INFLOW_KEYS) for n, s in cfg.inflows.items()},
            "controller": {n: _as_table(s, CONTROLLER_KEYS) for n, s in cfg.controllers.items()},
            "hil": _as_table(cfg.hil, HIL_KEYS)}


# ---------------------------------------------------------------------------
# parsing

def _line_of(text, section, key=None):
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
    for i, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1).replace('"', "").replace(" ", "")
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            if re.match(rf"^\s*\"?{re.escape(key)}\"?\s*=", line):
                return i
    return None


def _where(text, section, key=None):
    line = _line_of(text, section, key) if text else None
    name = f"{section}.{key}" if key else f"[{section}]"
    return f"{name} (line {line})" if line else name


def _convert(section, table, schema, text):
    out = {}
    for key, value in table.items():
        if key not in schema:
            raise ConfigError(f"unknown key {_where(text, section, key)}; "
                              f"valid keys: {', '.join(schema)}")
        name, types = schema[key]
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if not ok:
            raise ConfigError(f"{_where(text, section, key)} must be "
                              f"{'/'.join(t.__name__ for t in types)}, got {value!r}")
        if isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(f"{_where(text, section, key)} must be finite")
        out[name] = float(value) if types is _NUM else value
    return out


def _build(section, cls, kwargs, text, base=None):
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{_where(text, section)}: {exc}") from exc


def parse_config(data: dict, text: str = "") -> Config:
    known = {"turbine", "inflow", "controller", "sim", "hil"}
    for top in data:
        if top not in known:
            raise ConfigError(f"unknown section {_where(text, top)}; "
                              f"valid sections: {', '.join(sorted(known))}")
    cfg = default_config()
    turb = _convert("turbine", data.get("turbine", {}), TURBINE_KEYS, text)
    design_wind = turb.pop("design_wind", cfg.design_wind)
    tower_on = turb.pop("tower_enabled", False)
    tower_kw = {k: turb.pop(k) for k in [f.name for f in fields(TowerParams)] if k in turb}
    if "cp_coeffs" in turb:
        coeffs = turb["cp_coeffs"]
        if not all(isinstance(c, _NUM) and not isinstance(c, bool) for c in coeffs):
            raise ConfigError(f"{_where(text, 'turbine', 'cp_coeffs')} must be numbers")
        turb["cp_coeffs"] = tuple(float(c) for c in coeffs)
    if tower_on:
        turb["tower"] = _build("turbine", TowerParams, tower_kw, text)
    elif tower_kw:
        raise ConfigError(f"{_where(text, 'turbine', next(iter(tower_kw)))} given but "
                          f"tower_enabled is false")
    turbine = _build("turbine", TurbineParams, turb, text)
    sim = _build("sim", SimSettings, _convert("sim", data.get("sim", {}), SIM_KEYS, text), text)
    hil = _build("hil", HilSettings, _convert("hil", data.get("hil", {}), HIL_KEYS, text), text)
    if hil.mode not in ("lockstep", "realtime"):
        raise ConfigError(f"{_where(text, 'hil', 'mode')} must be 'lockstep' or 'realtime'")
    if not 0 <= hil.port < 65536:
        raise ConfigError(f"{_where(text, 'hil', 'port')} out of range")

    inflows = dict(cfg.inflows) if "inflow" not in data else {}
    for name, table in data.get("inflow", {}).items():
        section = f"inflow.{name}"
        if not isinstance(table, dict):
            raise ConfigError(f"{_where(text, 'inflow', name)} must be a table [{section}]")
        kw = _convert(section, table, INFLOW_KEYS, text)
        spec = _build(section, InflowSpec, dict(kw, name=name), text)
        if spec.kind not in ("constant", "step", "gust", "turbulence"):
            raise ConfigError(f"{_where(text, section, 'kind')}: unknown kind {spec.kind!r}")
        inflows[name] = spec
    controllers = dict(cfg.controllers) if "controller" not in data else {}
    for name, table in data.get("controller", {}).items():
        section = f"controller.{name}"
        if not isinstance(table, dict):
            raise ConfigError(f"{_where(text, 'controller', name)} must be a table [{section}]")
        kw = _convert(section, table, CONTROLLER_KEYS, text)
        controllers[name] = _build(section, ControllerSpec, dict(kw, name=name), text)
    try:
        SimConfig(dt_plant=sim.dt_plant, ctrl_period=sim.ctrl_period)
    except ValueError as exc:
        raise ConfigError(f"{_where(text, 'sim')}: {exc}") from exc
    if sim.repeats < 1:
        raise ConfigError(f"{_where(text, 'sim', 'repeats')} must be >= 1")
    return Config(turbine=turbine, design_wind=design_wind, sim=sim, inflows=inflows,
                  controllers=controllers, hil=hil)


def _parse_value(raw):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: dict, overrides):
    """Apply ``section.key=value`` strings; the section may itself be dotted."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) < 2 or not all(parts):
            raise ConfigError(f"override {item!r} is not section.key=value")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def load_config(path=None, overrides=()) -> Config:
    """Read a TOML file (or the defaults when ``path`` is None) plus overrides."""
    text = ""
    data = default_data()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        text = raw.decode("utf-8", errors="replace")
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    apply_overrides(data, overrides)
    return parse_config(data, text)

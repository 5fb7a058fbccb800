from pathlib import Path

import pytest

from scaledwt.config import ConfigError, apply_overrides, default_config, load_config

DEFAULT_TOML = Path(__file__).resolve().parents[1] / "configs" / "default.toml"


def test_shipped_file_equals_builtin_defaults():
    shipped = load_config(DEFAULT_TOML)
    builtin = default_config()
    assert shipped.turbine == builtin.turbine
    assert shipped.inflows == builtin.inflows
    assert shipped.controllers == builtin.controllers
    assert shipped.sim == builtin.sim and shipped.hil == builtin.hil
    assert shipped.design_wind == builtin.design_wind == 12.0


def test_unknown_key_names_key_and_line(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[sim]\nrepeats = 3\n\n[controller.mpc]\ntype = \"mpc\"\nNpp = 20\n")
    with pytest.raises(ConfigError, match=r"controller\.mpc\.Npp \(line 6\)"):
        load_config(p)


def test_unknown_section(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[plant]\nx = 1\n")
    with pytest.raises(ConfigError, match=r"\[plant\] \(line 1\)"):
        load_config(p)


@pytest.mark.parametrize("body, pattern", [
    ("[sim]\nrepeats = \"ten\"\n", "sim.repeats"),
    ("[sim]\ndt_plant_s = 0.003\n", "integer multiple"),
    ("[sim]\nrepeats = 0\n", "repeats"),
    ("[turbine]\ninertia_kg_m2 = true\n", "turbine.inertia_kg_m2"),
    ("[turbine]\ncp_coeffs = [1, \"a\"]\n", "cp_coeffs"),
    ("[turbine]\ntower_modal_mass_kg = 3.0\n", "tower_enabled"),
    ("[hil]\nmode = \"async\"\n", "hil.mode"),
    ("[hil]\nport = 70000\n", "hil.port"),
    ("[inflow.x]\nkind = \"storm\"\n", "unknown kind"),
    ("[controller.y]\ntype = \"hinf\"\n", "controller.y"),
    ("[controller.y]\ntype = \"mpc\"\nNp = 0\n", "Np"),
    ("[sim]\ndt_plant_s = nan\n", "finite"),
    ("[sim\n", "c.toml"),
])
def test_invalid_values_are_reported(tmp_path, body, pattern):
    p = tmp_path / "c.toml"
    p.write_text(body)
    with pytest.raises(ConfigError, match=pattern):
        load_config(p)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.toml")


def test_overrides_apply_to_named_tables():
    cfg = load_config(DEFAULT_TOML, ["inflow.gust.duration_s=60", "controller.mpc.Np=12",
                                     "sim.out_dir=elsewhere", "hil.mode=\"realtime\""])
    assert cfg.scenario("gust").duration == 60.0
    assert cfg.controller("mpc").Np == 12
    assert cfg.sim.out_dir == "elsewhere"
    assert cfg.hil.mode == "realtime"
    assert cfg.scenario("turbulence").duration == 20.0


def test_overrides_without_file_merge_into_defaults():
    cfg = load_config(None, ["inflow.turbulence.duration_s=1.5"])
    turb = cfg.scenario("turbulence")
    assert turb.kind == "turbulence" and turb.duration == 1.5
    assert turb.v_mean == default_config().scenario("turbulence").v_mean
    assert load_config(None).controllers == default_config().controllers


def test_override_syntax_errors():
    for bad in ("novalue", "=3", "sim=3", "sim..x=1"):
        with pytest.raises(ConfigError):
            apply_overrides({}, [bad])
    with pytest.raises(ConfigError, match="sim.bogus"):
        load_config(None, ["sim.bogus=1"])


def test_file_sections_replace_builtin_tables(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[controller.fast]\ntype = \"mpc\"\nNp = 5\n")
    cfg = load_config(p)
    assert list(cfg.controllers) == ["fast"]
    assert list(cfg.inflows) == ["gust", "turbulence"]
    assert cfg.controller().Np == 5
    with pytest.raises(ConfigError, match="unknown controller"):
        cfg.controller("mpc")


def test_sim_config_assembly():
    cfg = default_config()
    sc = cfg.sim_config("turbulence", "lqr", seed=7)
    assert sc.inflow.kind == "turbulence" and sc.controller.type == "lqr" and sc.seed == 7
    assert cfg.plant().op.v == 12.0

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanmatch.config import (
    ConfigError,
    canonical_json,
    content_hash,
    data_path,
    labor_market_config,
    load_config,
    parse_config,
)

MINIMAL = {
    "rho": 0.04,
    "T": 1.0,
    "sideA": {"lambda": 20, "r_slope": 0.013, "h_slope": 0.6,
              "density": {"family": "pln", "params": {"alpha": 1.8644, "nu": 6.5492, "tau": 0.44209}}},
    "sideB": {"lambda": 26, "r_slope": 0.05, "h_slope": 1.1,
              "density": {"family": "gp", "params": {"beta": 8.6348, "mu": 459.4388, "sigma": 835.2216}}},
}


def test_minimal_config_gets_defaults():
    cfg = load_config(MINIMAL)
    assert cfg.data["grid"] == {"xmax": 7000.0, "nA": 200, "nB": 200, "nT": 200}
    assert cfg.data["solver"]["tol"] == 1e-4
    assert cfg.solver_options().sweep_mode == "jacobi"
    g = cfg.grids()
    assert g.x.n_cells == 200 and g.t.n_steps == 200


def test_negative_rho_names_pointer():
    with pytest.raises(ConfigError) as err:
        load_config({**MINIMAL, "rho": -0.1})
    assert err.value.pointer == "/rho"


def test_nested_pointer_and_unknown_keys():
    bad = json.loads(json.dumps(MINIMAL))
    bad["sideB"]["lambda"] = "fast"
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert err.value.pointer == "/sideB/lambda"
    with pytest.raises(ConfigError):
        load_config({**MINIMAL, "rhoo": 1})
    with pytest.raises(ConfigError) as err:
        load_config({**MINIMAL, "grid": {"nA": 100, "nX": 3}})
    assert err.value.pointer == "/grid"


def test_density_parameter_names_checked():
    bad = json.loads(json.dumps(MINIMAL))
    bad["sideA"]["density"]["params"] = {"beta": 1.0, "mu": 1.0, "sigma": 1.0}
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert err.value.pointer == "/sideA/density/params"


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


@pytest.mark.parametrize("name", ["labor_market.json", "labor_market_damped.json", "no_match.json",
                                  "decoupled.json"])
def test_shipped_configs_round_trip(name, tmp_path):
    cfg = parse_config(data_path(name))
    p = tmp_path / "c.json"
    p.write_text(cfg.canonical)
    again = load_config(p)
    assert again.canonical == cfg.canonical
    assert again.hash == cfg.hash


def test_labor_market_config_matches_published_parameters():
    cfg = labor_market_config()
    m = cfg.market()
    assert (m.side_A.intensity, m.side_B.intensity, m.rho, m.horizon) == (20.0, 26.0, 0.04, 1.0)
    assert (m.side_A.running_slope, m.side_B.running_slope) == (0.013, 0.05)
    assert (m.side_A.terminal_slope, m.side_B.terminal_slope) == (0.6, 1.1)
    assert m.side_B.density.mu == 459.4388


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), tol=st.floats(1e-8, 1e-2))
def test_hash_is_content_hash(seed, tol):
    cfg = load_config({**MINIMAL, "seed": seed, "solver": {"tol": tol}})
    reordered = dict(reversed(list(cfg.data.items())))
    assert content_hash(reordered) == cfg.hash
    assert canonical_json(reordered) == cfg.canonical

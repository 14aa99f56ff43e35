"""Run configuration: strict JSON schema, defaults, canonical form and content hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from . import income
from .solver import MarketGrids, MarketParams, MarketSideParams, SolverOptions


class ConfigError(ValueError):
    """Schema violation or unreadable configuration; ``pointer`` locates the field."""

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


SWEEP_ALIASES = {
    "Jacobi": "jacobi", "jacobi": "jacobi",
    "GaussSeidelInTime": "gauss_seidel", "gauss_seidel": "gauss_seidel",
}

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

_DENSITY = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "params"],
    "properties": {
        "family": {"enum": ["pln", "gp"]},
        "params": {"type": "object", "additionalProperties": _POSITIVE},
    },
}

_SIDE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["lambda", "r_slope", "h_slope", "density"],
    "properties": {"lambda": _NONNEG, "r_slope": _NONNEG, "h_slope": _NONNEG, "density": _DENSITY},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["rho", "T", "sideA", "sideB"],
    "properties": {
        "rho": _POSITIVE,
        "T": _POSITIVE,
        "sideA": _SIDE,
        "sideB": _SIDE,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "xmax": _POSITIVE,
                "nA": {"type": "integer", "minimum": 2},
                "nB": {"type": "integer", "minimum": 2},
                "nT": {"type": "integer", "minimum": 1},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _POSITIVE,
                "max_iters": {"type": "integer", "minimum": 1},
                "sweep_mode": {"enum": sorted(SWEEP_ALIASES)},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "agents": {"type": "integer", "minimum": 1},
                "replicates": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["mean_field", "physical"]},
                "sampling": {"enum": ["grid", "continuous"]},
                "bins": {"type": "integer", "minimum": 1},
            },
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    },
}

DEFAULTS = {
    "grid": {"xmax": 7000.0, "nA": 200, "nB": 200, "nT": 200},
    "solver": {"tol": 1e-4, "max_iters": 5000, "sweep_mode": "Jacobi", "damping": 1.0},
    "simulate": {"agents": 50000, "replicates": 8, "mode": "mean_field", "sampling": "grid", "bins": 20},
    "seed": 0,
}

_PARAM_NAMES = {"pln": ("alpha", "nu", "tau"), "gp": ("beta", "mu", "sigma")}


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def _with_defaults(raw: dict) -> dict:
    cfg = copy.deepcopy(raw)
    for key, value in DEFAULTS.items():
        if isinstance(value, dict):
            cfg[key] = {**value, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, value)
    return cfg


def validate(raw) -> dict:
    """Validate a configuration mapping and return it with defaults filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _pointer(err.absolute_path))
    for side in ("sideA", "sideB"):
        dens = raw[side]["density"]
        expected = set(_PARAM_NAMES[dens["family"]])
        got = set(dens["params"])
        if got != expected:
            raise ConfigError(f"expected parameters {sorted(expected)}, got {sorted(got)}",
                              f"/{side}/density/params")
    return _with_defaults(raw)


def canonical_json(cfg: dict) -> str:
    """Key-sorted compact JSON; the byte stream the content hash is taken over."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


@dataclass
class RunConfig:
    data: dict

    @property
    def canonical(self) -> str:
        return canonical_json(self.data)

    @property
    def hash(self) -> str:
        return content_hash(self.data)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def market(self) -> MarketParams:
        return market_from_config(self.data)

    def grids(self) -> MarketGrids:
        g = self.data["grid"]
        return MarketGrids.uniform(self.data["T"], g["xmax"], g["xmax"], g["nA"], g["nB"], g["nT"])

    def solver_options(self) -> SolverOptions:
        s = self.data["solver"]
        return SolverOptions(tol=s["tol"], max_iters=s["max_iters"],
                             sweep_mode=SWEEP_ALIASES[s["sweep_mode"]], damping=float(s["damping"]))


def _side(cfg: dict) -> MarketSideParams:
    dens = cfg["density"]
    return MarketSideParams(
        intensity=float(cfg["lambda"]),
        running_slope=float(cfg["r_slope"]),
        terminal_slope=float(cfg["h_slope"]),
        density=income.params_from_dict(dens["family"], dens["params"]),
    )


def market_from_config(cfg: dict) -> MarketParams:
    return MarketParams(side_A=_side(cfg["sideA"]), side_B=_side(cfg["sideB"]),
                        rho=float(cfg["rho"]), horizon=float(cfg["T"]))


def load_config(source) -> RunConfig:
    """Read, validate and default a configuration from a path or a mapping."""
    if isinstance(source, dict):
        return RunConfig(validate(source))
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return RunConfig(validate(raw))


parse_config = load_config


def data_path(name: str) -> Path:
    """Path of a file shipped in the package data directory."""
    return Path(str(resources.files("meanmatch") / "data" / name))


def labor_market_config() -> RunConfig:
    return load_config(data_path("labor_market.json"))

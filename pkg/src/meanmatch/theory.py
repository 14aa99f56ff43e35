"""Analytic constants, sufficient conditions, and a property audit for solved states.

The constants bound the value functions (bi-Lipschitz slopes ``k_I``/``K_I``,
growth ``Pi_I``) and enter the existence and uniqueness conditions. All of
them are plain arithmetic on the market parameters, the initial-density
envelopes, and the utility bounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .grids import SpatialGrid, TimeGrid
from .solver import EquilibriumState, MarketGrids, MarketParams, MarketSideParams

#: minimum admissible envelope constant (must be strictly above one)
ENVELOPE_FLOOR = 1.0 + 1e-9
DEFAULT_NU = 0.5


def envelope_constants(f0, nodes, nu: float = DEFAULT_NU):
    """Smallest grid-certified ``C`` with ``f0(z) <= C / (1 + z**(2 + nu))``.

    Returns ``(C, nu)``; ``C`` is floored at ``1 + 1e-9``.

    >>> z = np.linspace(0.0, 5.0, 11)
    >>> envelope_constants(1.0 / (1.0 + z ** 2.5), z)[0] == 1.0 + 1e-9
    True
    """
    if nu <= 0:
        raise ValueError(f"nu must be > 0, got {nu}")
    f0 = np.asarray(f0, dtype=float)
    z = np.asarray(nodes, dtype=float)
    if np.any(f0 < 0):
        raise ValueError("f0 must be nonnegative")
    scaled = (1.0 + z ** (2.0 + nu)) * f0
    return max(ENVELOPE_FLOOR, float(scaled.max(initial=0.0))), nu


@dataclass(frozen=True)
class UtilityBounds:
    """Bi-Lipschitz bounds: running ``gamma <= slope <= Gamma``, terminal ``l <= slope <= L``."""

    gamma: float
    Gamma: float
    l: float
    L: float


def utility_bounds(side: MarketSideParams, grid: SpatialGrid, time: TimeGrid) -> UtilityBounds:
    """Slopes for linear utilities; min/max difference quotients for general ones."""
    if side.running is None and side.terminal is None:
        return UtilityBounds(side.running_slope, side.running_slope, side.terminal_slope, side.terminal_slope)
    z = grid.nodes
    r = side.running_utility(z, time.nodes)
    dr = np.diff(r, axis=0) / grid.dx
    dh = np.diff(side.terminal_utility(z)) / grid.dx
    return UtilityBounds(float(dr.min()), float(dr.max()), float(dh.min()), float(dh.max()))


@dataclass(frozen=True)
class TheoryConstants:
    rho: float
    horizon: float
    lam_A: float
    lam_B: float
    nu: float
    gamma_A: float
    Gamma_A: float
    l_A: float
    L_A: float
    gamma_B: float
    Gamma_B: float
    l_B: float
    L_B: float
    C_A: float
    C_B: float
    k_A: float
    k_B: float
    K_A: float
    K_B: float
    Pi_A: float
    Pi_B: float
    M_A: float
    M_B: float
    M_2: float
    M_3: float
    c_A: float
    c_B: float
    delta_1: float
    delta_2: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.inf


def compute_constants(params: MarketParams, envelopes, bounds) -> TheoryConstants:
    """Evaluate every constant from parameters, envelopes and utility bounds.

    ``envelopes`` is ``((C_A, nu), (C_B, nu))``; ``bounds`` is a pair of
    :class:`UtilityBounds` for sides A and B.
    """
    (C_A, nu), (C_B, nu_b) = envelopes
    if nu != nu_b:
        raise ValueError("both envelopes must use the same nu")
    bA, bB = bounds
    rho, T = params.rho, params.horizon
    lam_A, lam_B = params.side_A.intensity, params.side_B.intensity

    # a side's matching hazard is driven by the other side's intensity
    k_A = min(bA.gamma / (rho + lam_B), bA.l)
    k_B = min(bB.gamma / (rho + lam_A), bB.l)
    K_A = max(lam_B * _ratio(C_B, rho * k_B) + bA.Gamma / rho, bA.L)
    K_B = max(lam_A * _ratio(C_A, rho * k_A) + bB.Gamma / rho, bB.L)
    tail = 2.0 ** (1.0 + nu) / nu
    Pi_A = max((lam_B / rho) * (tail * C_B + bA.Gamma), bA.L)
    Pi_B = max((lam_A / rho) * (tail * C_A + bB.Gamma), bB.L)
    M_A = max(2.0, _ratio((1.0 + C_A) * (1.0 + k_A), k_A ** 2))
    M_B = max(2.0, _ratio((1.0 + C_B) * (1.0 + k_B), k_B ** 2))
    M_2 = max(lam_A + lam_B * tail * C_A, lam_B + lam_A * tail * C_B)
    M_3 = (2.0 ** (3.0 + nu) * C_A * C_B / nu) * max(
        _ratio(lam_A + lam_B * (1.0 + k_A), k_A), _ratio(lam_B + lam_A * (1.0 + k_B), k_B)
    )
    c_A = lam_B * tail * C_A
    c_B = lam_A * tail * C_B

    inv = [1.0 / (4.0 * lam) for lam in (lam_B, lam_A) if lam > 0]
    cross = 2.0 * math.sqrt(2.0 * lam_A * (1.0 + C_A) * (1.0 + k_A) * lam_B * (1.0 + C_B) * (1.0 + k_B))
    inv.append(_ratio(k_A * k_B, cross))
    delta_1 = min(inv)
    fp_den = 2.0 ** (3.0 + 2.0 * nu) * lam_A * lam_B * C_A * C_B
    delta_2 = min(1.0, math.sqrt(_ratio(nu ** 2 * math.exp(-(lam_A + lam_B)), fp_den)))

    return TheoryConstants(
        rho=rho, horizon=T, lam_A=lam_A, lam_B=lam_B, nu=nu,
        gamma_A=bA.gamma, Gamma_A=bA.Gamma, l_A=bA.l, L_A=bA.L,
        gamma_B=bB.gamma, Gamma_B=bB.Gamma, l_B=bB.l, L_B=bB.L,
        C_A=C_A, C_B=C_B, k_A=k_A, k_B=k_B, K_A=K_A, K_B=K_B, Pi_A=Pi_A, Pi_B=Pi_B,
        M_A=M_A, M_B=M_B, M_2=M_2, M_3=M_3, c_A=c_A, c_B=c_B, delta_1=delta_1, delta_2=delta_2,
    )


def constants_for(params: MarketParams, grids: MarketGrids, nu: float = DEFAULT_NU) -> TheoryConstants:
    """Convenience wrapper: envelopes and utility bounds taken from the grids."""
    env_A = envelope_constants(params.side_A.initial_density(grids.x.nodes), grids.x.nodes, nu)
    env_B = envelope_constants(params.side_B.initial_density(grids.y.nodes), grids.y.nodes, nu)
    bounds = (utility_bounds(params.side_A, grids.x, grids.t), utility_bounds(params.side_B, grids.y, grids.t))
    return compute_constants(params, (env_A, env_B), bounds)


def no_match_brackets(constants: TheoryConstants, t) -> tuple:
    t = np.asarray(t, dtype=float)
    w = np.exp(-constants.rho * (constants.horizon - t))
    bracket_A = w * constants.l_A + (1.0 - w) * constants.gamma_A / constants.rho
    bracket_B = w * constants.l_B + (1.0 - w) * constants.gamma_B / constants.rho
    return bracket_A, bracket_B


def check_no_match(constants: TheoryConstants, t_grid):
    """Per-time flags for the no-matching sufficient condition, and their conjunction."""
    t = t_grid.nodes if isinstance(t_grid, TimeGrid) else np.asarray(t_grid, dtype=float)
    bracket_A, bracket_B = no_match_brackets(constants, t)
    per_t = bracket_A * bracket_B > 1.0
    return per_t, bool(np.all(per_t))


def check_nonempty(constants: TheoryConstants) -> bool:
    """Sufficient condition for every matching region to be nonempty."""
    return constants.K_A * constants.K_B <= 1.0


def check_uniqueness(constants: TheoryConstants) -> dict:
    """Evaluate both uniqueness conditions and report their operands."""
    c = constants
    lam_max = max(c.lam_A, c.lam_B)
    growth = c.lam_A * c.M_A + c.lam_B * c.M_B
    discount = (1.0 - math.exp(-c.rho * c.horizon)) / c.rho
    with np.errstate(over="ignore", invalid="ignore"):
        # realistic constants overflow double precision; inf is the honest value
        growth_factor = float(np.expm1(growth * c.horizon) / growth) if growth > 0 else c.horizon
        lhs_I = float(c.M_3 * lam_max * np.exp(c.M_2 * c.horizon) * discount * growth_factor)
    lhs_II = 2.0 * math.sqrt(lam_max * c.M_3)
    rhs_II = c.rho - c.M_2 - growth
    return {
        "cond_I": bool(lhs_I < 1.0),
        "cond_II": bool(lhs_II < rhs_II),
        "cond_I_lhs": lhs_I,
        "cond_I_rhs": 1.0,
        "cond_II_lhs": lhs_II,
        "cond_II_rhs": rhs_II,
        "lam_max": lam_max,
        "M_2": c.M_2,
        "M_3": c.M_3,
        "growth": growth,
    }


@dataclass(frozen=True)
class AuditTolerances:
    slope_slack: float = 0.05
    growth_slack: float = 0.05
    solver_tol: float = 1e-4
    #: absolute slack for comparisons that are exact in exact arithmetic
    roundoff: float = 1e-12


@dataclass
class AuditCheck:
    check_name: str
    passed: bool
    worst_value: float
    worst_location: list

    def to_dict(self) -> dict:
        return {"check_name": self.check_name, "pass": self.passed,
                "worst_value": self.worst_value, "worst_location": self.worst_location}


def _loc(arr, idx) -> list:
    return [int(v) for v in np.unravel_index(idx, arr.shape)]


def _audit_side(name, V, f, f0, K, Pi, C, nu, tol: AuditTolerances) -> list:
    checks = []
    x = V.grid.nodes
    dx = V.grid.dx
    slopes = np.diff(V.values, axis=0) / dx

    j = int(np.argmin(slopes))
    checks.append(AuditCheck(f"{name}.value_monotone", bool(slopes.min() >= -tol.roundoff),
                             float(slopes.flat[j]), _loc(slopes, j)))
    j = int(np.argmax(slopes))
    checks.append(AuditCheck(f"{name}.slope_upper", bool(slopes.max() <= K * (1 + tol.slope_slack)),
                             float(slopes.flat[j]), _loc(slopes, j)))
    origin = np.abs(V.values[0])
    j = int(np.argmax(origin))
    checks.append(AuditCheck(f"{name}.value_at_zero", bool(origin.max() <= 10 * tol.solver_tol),
                             float(origin[j]), [0, j]))
    growth = V.values / (1.0 + x[:, None])
    j = int(np.argmax(growth))
    checks.append(AuditCheck(f"{name}.growth_bound", bool(growth.max() <= Pi * (1 + tol.growth_slack)),
                             float(growth.flat[j]), _loc(growth, j)))

    # density: nonnegative, below f0, nonincreasing in time
    f_vals = f.values
    excess = f_vals - f0[:, None]
    rises = np.diff(f_vals, axis=1)
    neg = -f_vals
    rises = np.pad(rises, ((0, 0), (1, 0)), constant_values=-np.inf)
    # report the most basic violation first: sign, then the f0 cap, then growth in time
    parts = ((neg, 0.0), (excess, tol.roundoff), (rises, tol.roundoff))
    failing = [(arr, limit) for arr, limit in parts if arr.max() > limit]
    arr = failing[0][0] if failing else excess
    j = int(np.argmax(arr))
    checks.append(AuditCheck(f"{name}.density_bounds", not failing, float(arr.flat[j]), _loc(arr, j)))

    weighted = dx * np.sum((1.0 + x[1:, None]) * f_vals[1:], axis=0)
    cap = 2.0 ** (1.0 + nu) * C / nu
    j = int(np.argmax(weighted))
    checks.append(AuditCheck(f"{name}.weighted_mass", bool(weighted.max() <= cap), float(weighted[j]), [j]))

    F_T = dx * float(np.sum(f_vals[1:, -1]))
    checks.append(AuditCheck(f"{name}.unmatched_positive", bool(F_T > 0.0), F_T, [f.time.n_steps]))
    return checks


def audit_solution(solution: EquilibriumState, constants: TheoryConstants, params: MarketParams,
                   tolerances: AuditTolerances | None = None) -> list:
    """Check a solved state against the provable properties; returns :class:`AuditCheck` rows."""
    tol = tolerances or AuditTolerances()
    f0_A = params.side_A.initial_density(solution.f_A.grid.nodes)
    f0_B = params.side_B.initial_density(solution.f_B.grid.nodes)
    c = constants
    return (_audit_side("A", solution.V_A, solution.f_A, f0_A, c.K_A, c.Pi_A, c.C_A, c.nu, tol)
            + _audit_side("B", solution.V_B, solution.f_B, f0_B, c.K_B, c.Pi_B, c.C_B, c.nu, tol))


def audit_to_json(checks: list) -> str:
    return json.dumps([chk.to_dict() for chk in checks], indent=2)


def audit_passed(checks: list) -> bool:
    return all(chk.passed for chk in checks)

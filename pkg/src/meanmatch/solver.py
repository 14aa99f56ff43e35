"""Finite-difference fixed-point solver for the coupled HJB / Fokker-Planck system.

The unknowns are the value functions ``V_A(x, t)``, ``V_B(y, t)`` (which are
also the optimal acceptance thresholds) and the unmatched densities
``f_A(x, t)``, ``f_B(y, t)``. One iteration maps iterate ``n`` to ``n + 1``:

* value sweep (backward in time, implicit in the discount)::

      V_A[i, k] = (V_A[i, k+1] + (lam_B * S_A[i, k] + r_A[i, k]) * dt) / (rho * dt + 1)

* density sweep (forward in time)::

      f_A[i, k+1] = f_A[i, k] / (dt * max(lam_B * M_A[i, k], 0) + 1)

where ``M_A`` and ``S_A`` are right-endpoint sums of ``f_B`` and
``(y - V_A) f_B`` over the mutual-acceptance region
``{y_l : V_A[i, k] <= y_l, V_B[l, k] <= x_i}``. In the default Jacobi mode
every right-hand side uses iterate-``n`` data only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from . import income
from ._validation import check_int_at_least, check_is_fitted, check_positive
from .grids import SpaceTimeField, SpatialGrid, TimeGrid, build_grid, build_time_grid, interpolate_many

logger = logging.getLogger(__name__)

SWEEP_MODES = ("jacobi", "gauss_seidel")


class SolverHealthError(RuntimeError):
    """A threshold field lost monotonicity in quality beyond tolerance."""


class NumericalFaultError(FloatingPointError):
    """A NaN or Inf appeared in a solver field."""

    def __init__(self, field_name: str, i: int, k: int):
        self.field_name, self.i, self.k = field_name, i, k
        super().__init__(f"non-finite value in {field_name} at (i={i}, k={k})")


@dataclass
class MarketSideParams:
    """One side of the market.

    ``intensity`` is this side's Poisson meeting intensity; it drives the
    *other* side's matching hazard. Utilities default to the linear forms
    ``r(z, t) = running_slope * z`` and ``h(z) = terminal_slope * z``; pass
    ``running``/``terminal`` callables to use general (bi-Lipschitz) ones.
    ``density`` is an :mod:`meanmatch.income` parameter record, a callable
    ``f0(z)``, or an array tabulated on the side's grid nodes.
    """

    intensity: float
    running_slope: float = 0.0
    terminal_slope: float = 0.0
    density: object = None
    running: Callable | None = None
    terminal: Callable | None = None

    def __post_init__(self):
        check_positive(self.intensity, "intensity", allow_zero=True)
        check_positive(self.running_slope, "running_slope", allow_zero=True)
        check_positive(self.terminal_slope, "terminal_slope", allow_zero=True)

    def running_utility(self, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.running is not None:
            return np.asarray(self.running(z[:, None], t[None, :]), dtype=float) * np.ones((z.size, t.size))
        return self.running_slope * z[:, None] * np.ones((1, t.size))

    def terminal_utility(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.terminal is not None:
            return np.asarray(self.terminal(z), dtype=float) * np.ones_like(z)
        return self.terminal_slope * z

    def initial_density(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.density is None:
            raise ValueError("no initial density configured")
        if hasattr(self.density, "family"):
            values = income.pdf(self.density, z)
        elif callable(self.density):
            values = self.density(z)
        else:
            values = np.asarray(self.density, dtype=float)
            if values.shape != z.shape:
                raise ValueError(f"tabulated density has shape {values.shape}, grid needs {z.shape}")
        values = np.asarray(values, dtype=float)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("initial density must be finite and nonnegative")
        return values


@dataclass
class MarketParams:
    side_A: MarketSideParams
    side_B: MarketSideParams
    rho: float
    horizon: float

    def __post_init__(self):
        check_positive(self.rho, "rho")
        check_positive(self.horizon, "horizon")


@dataclass(frozen=True)
class MarketGrids:
    """Quality grids for both sides plus the shared time grid."""

    x: SpatialGrid
    y: SpatialGrid
    t: TimeGrid

    @classmethod
    def uniform(cls, horizon: float, x_max: float = 7000.0, y_max: float = 7000.0,
                n_a: int = 200, n_b: int = 200, n_t: int = 200) -> "MarketGrids":
        return cls(build_grid(x_max, n_a), build_grid(y_max, n_b), build_time_grid(horizon, n_t))


@dataclass
class SolverOptions:
    tol: float = 1e-4
    max_iters: int = 5000
    denominator_floor: float = 1e-12
    sweep_mode: str = "jacobi"
    damping: float = 1.0
    #: relative slack allowed when checking that thresholds are nondecreasing
    monotone_tol: float = 1e-9

    def __post_init__(self):
        check_positive(self.tol, "tol")
        check_int_at_least(self.max_iters, 1, "max_iters")
        check_positive(self.denominator_floor, "denominator_floor")
        if self.sweep_mode not in SWEEP_MODES:
            raise ValueError(f"sweep_mode must be one of {SWEEP_MODES}, got {self.sweep_mode!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


@dataclass
class EquilibriumState:
    V_A: SpaceTimeField
    V_B: SpaceTimeField
    f_A: SpaceTimeField
    f_B: SpaceTimeField
    iteration: int = 0
    residual: float = math.inf
    converged: bool = False
    #: rows of (iteration, E, E_VA, E_VB, E_fA, E_fB)
    trace: list = field(default_factory=list)

    def fields(self) -> dict:
        return {"V_A": self.V_A, "V_B": self.V_B, "f_A": self.f_A, "f_B": self.f_B}

    def side(self, name: str):
        """``(V_self, V_other, f_self, f_other)`` for side ``"A"`` or ``"B"``."""
        if name == "A":
            return self.V_A, self.V_B, self.f_A, self.f_B
        if name == "B":
            return self.V_B, self.V_A, self.f_B, self.f_A
        raise ValueError(f"side must be 'A' or 'B', got {name!r}")


# -- matching region --------------------------------------------------------

def _monotone_kind(column: np.ndarray, tol: float) -> str:
    """'strict' if nondecreasing, 'slack' if within ``tol``, else 'broken'."""
    steps = np.diff(column)
    if steps.size == 0 or steps.min() >= 0.0:
        return "strict"
    scale = max(1.0, float(np.max(np.abs(column))))
    return "slack" if steps.min() >= -tol * scale else "broken"


def region_sums(self_nodes, threshold, other_nodes, V_other, f_other, d_other, monotone_tol=1e-9):
    """Mass and first moment of ``f_other`` over each agent's acceptance region.

    For every self node ``x_i`` with threshold ``threshold[i]`` the region is
    the set of other-side nodes ``l >= 1`` with ``threshold[i] <= y_l`` and
    ``V_other[l] <= x_i``. Returns ``(mass, moment)`` arrays where
    ``moment[i] = d_other * sum (y_l - threshold[i]) f_other[l]``.

    When ``V_other`` is nondecreasing the region is a contiguous index range
    found by binary search; within the monotonicity tolerance the member
    nodes are enumerated directly so the result is identical either way.
    """
    y = other_nodes[1:]
    v = V_other[1:]
    f = f_other[1:]
    kind = _monotone_kind(V_other, monotone_tol)
    if kind == "broken":
        steps = np.diff(V_other)
        j = int(np.argmin(steps))
        raise SolverHealthError(f"threshold not monotone in quality near node {j} (step {steps[j]:.3e})")
    if kind == "slack":
        member = (y[None, :] >= threshold[:, None]) & (v[None, :] <= self_nodes[:, None])
        mass = d_other * (member * f[None, :]).sum(axis=1)
        moment = d_other * (member * ((y[None, :] - threshold[:, None]) * f[None, :])).sum(axis=1)
        return mass, np.maximum(moment, 0.0)
    hi = np.searchsorted(v, self_nodes, side="right")
    lo = np.searchsorted(y, threshold, side="left")
    cum_f = np.concatenate(([0.0], np.cumsum(f)))
    cum_yf = np.concatenate(([0.0], np.cumsum(y * f)))
    nonempty = hi > lo
    hi = np.where(nonempty, hi, lo)
    mass_sum = cum_f[hi] - cum_f[lo]
    moment = d_other * ((cum_yf[hi] - cum_yf[lo]) - threshold * mass_sum)
    return d_other * mass_sum, np.where(nonempty, np.maximum(moment, 0.0), 0.0)


def _node_index(grid: SpatialGrid, x: float) -> int:
    i = int(round(x / grid.dx))
    if not 0 <= i <= grid.n_cells or not math.isclose(grid.nodes[i], x, rel_tol=1e-12, abs_tol=1e-12 * grid.x_max):
        raise ValueError(f"x={x!r} is not a node of the grid")
    return i


def _pointwise_region(x, t_index, V_self, V_other, f_other, monotone_tol=1e-9):
    i = _node_index(V_self.grid, x)
    k = int(t_index)
    mass, moment = region_sums(
        np.array([V_self.grid.nodes[i]]),
        np.array([V_self.values[i, k]]),
        V_other.grid.nodes,
        V_other.values[:, k],
        f_other.values[:, k],
        V_other.grid.dx,
        monotone_tol,
    )
    return float(mass[0]), float(moment[0])


def region_mass(x: float, t_index: int, V_self: SpaceTimeField, V_other: SpaceTimeField,
                f_other: SpaceTimeField, monotone_tol: float = 1e-9) -> float:
    """Right-endpoint mass of ``f_other`` over the acceptance region of grid node ``x``."""
    return _pointwise_region(x, t_index, V_self, V_other, f_other, monotone_tol)[0]


def region_first_moment(x: float, t_index: int, V_self: SpaceTimeField, V_other: SpaceTimeField,
                        f_other: SpaceTimeField, monotone_tol: float = 1e-9) -> float:
    """Right-endpoint sum of ``(y - V_self(x, t)) f_other`` over the acceptance region."""
    return _pointwise_region(x, t_index, V_self, V_other, f_other, monotone_tol)[1]


def coupling_terms(V_self: SpaceTimeField, V_other: SpaceTimeField, f_other: SpaceTimeField,
                   monotone_tol: float = 1e-9):
    """Region mass and moment for every ``(i, k)`` with ``k < Nt``; shape ``(N+1, Nt)``."""
    nodes = V_self.grid.nodes
    other_nodes = V_other.grid.nodes
    d_other = V_other.grid.dx
    n_t = V_self.time.n_steps
    mass = np.empty((nodes.size, n_t))
    moment = np.empty((nodes.size, n_t))
    for k in range(n_t):
        try:
            mass[:, k], moment[:, k] = region_sums(
                nodes, V_self.values[:, k], other_nodes, V_other.values[:, k], f_other.values[:, k],
                d_other, monotone_tol,
            )
        except SolverHealthError as exc:
            raise SolverHealthError(f"{exc} at time index {k}") from None
    return mass, moment


# -- sweeps -----------------------------------------------------------------

def _check_finite(values: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise NumericalFaultError(name, int(i), int(k))


def _value_update(V: SpaceTimeField, moment, hazard_rate, running, terminal, rho, options) -> np.ndarray:
    dt = V.time.dt
    source = (hazard_rate * moment + running[:, :-1]) * dt
    new = np.empty_like(V.values)
    new[:, -1] = terminal
    if options.sweep_mode == "jacobi":
        new[:, :-1] = (V.values[:, 1:] + source) / (rho * dt + 1.0)
    else:
        for k in range(V.time.n_steps - 1, -1, -1):
            new[:, k] = (new[:, k + 1] + source[:, k]) / (rho * dt + 1.0)
    if options.damping < 1.0:
        new = options.damping * new + (1.0 - options.damping) * V.values
        new[:, -1] = terminal
    return new


def _density_update(f: SpaceTimeField, mass, hazard_rate, f0, options) -> np.ndarray:
    dt = f.time.dt
    if np.any(mass < 0):
        i, k = np.argwhere(mass < 0)[0]
        raise NumericalFaultError("region mass", int(i), int(k))
    denom = dt * np.maximum(hazard_rate * mass, 0.0) + 1.0
    new = np.empty_like(f.values)
    new[:, 0] = f0
    if options.sweep_mode == "jacobi":
        new[:, 1:] = f.values[:, :-1] / denom
    else:
        for k in range(f.time.n_steps):
            new[:, k + 1] = new[:, k] / denom[:, k]
    if options.damping < 1.0:
        new = options.damping * new + (1.0 - options.damping) * f.values
        new[:, 0] = f0
    return new


class _Boundary:
    """Terminal utilities, initial densities and running utilities on the grids."""

    def __init__(self, params: MarketParams, grids: MarketGrids):
        t = grids.t.nodes
        self.h_A = params.side_A.terminal_utility(grids.x.nodes)
        self.h_B = params.side_B.terminal_utility(grids.y.nodes)
        self.f0_A = params.side_A.initial_density(grids.x.nodes)
        self.f0_B = params.side_B.initial_density(grids.y.nodes)
        self.r_A = params.side_A.running_utility(grids.x.nodes, t)
        self.r_B = params.side_B.running_utility(grids.y.nodes, t)


def value_sweep(state: EquilibriumState, params: MarketParams, options: SolverOptions | None = None,
                _terms=None, _boundary=None):
    """Backward value update; returns ``(V_A_new, V_B_new)`` as arrays."""
    options = options or SolverOptions()
    grids = MarketGrids(state.V_A.grid, state.V_B.grid, state.V_A.time)
    bnd = _boundary or _Boundary(params, grids)
    if _terms is None:
        _terms = (
            coupling_terms(state.V_A, state.V_B, state.f_B, options.monotone_tol),
            coupling_terms(state.V_B, state.V_A, state.f_A, options.monotone_tol),
        )
    (_, moment_A), (_, moment_B) = _terms
    new_A = _value_update(state.V_A, moment_A, params.side_B.intensity, bnd.r_A, bnd.h_A, params.rho, options)
    new_B = _value_update(state.V_B, moment_B, params.side_A.intensity, bnd.r_B, bnd.h_B, params.rho, options)
    _check_finite(new_A, "V_A")
    _check_finite(new_B, "V_B")
    return new_A, new_B


def density_sweep(state: EquilibriumState, params: MarketParams, options: SolverOptions | None = None,
                  _terms=None, _boundary=None):
    """Forward density update; returns ``(f_A_new, f_B_new)`` as arrays."""
    options = options or SolverOptions()
    grids = MarketGrids(state.V_A.grid, state.V_B.grid, state.V_A.time)
    bnd = _boundary or _Boundary(params, grids)
    if _terms is None:
        _terms = (
            coupling_terms(state.V_A, state.V_B, state.f_B, options.monotone_tol),
            coupling_terms(state.V_B, state.V_A, state.f_A, options.monotone_tol),
        )
    (mass_A, _), (mass_B, _) = _terms
    new_A = _density_update(state.f_A, mass_A, params.side_B.intensity, bnd.f0_A, options)
    new_B = _density_update(state.f_B, mass_B, params.side_A.intensity, bnd.f0_B, options)
    _check_finite(new_A, "f_A")
    _check_finite(new_B, "f_B")
    return new_A, new_B


def _relative_term(new: np.ndarray, old: np.ndarray, cell: float, floor: float) -> float:
    # right-endpoint double sum: drop quality node 0 and time node 0
    rel = (new[1:, 1:] - old[1:, 1:]) / np.maximum(np.abs(old[1:, 1:]), floor)
    return math.sqrt(float(np.sum(rel * rel)) * cell)


def residual_terms(prev: EquilibriumState, new: EquilibriumState, options: SolverOptions | None = None):
    """``(E_VA, E_VB, E_fA, E_fB)``: root integrated squared relative increments."""
    floor = (options or SolverOptions()).denominator_floor
    dt = prev.V_A.time.dt
    out = []
    for name in ("V_A", "V_B", "f_A", "f_B"):
        a, b = getattr(prev, name), getattr(new, name)
        if a.values.shape != b.values.shape:
            raise ValueError(f"{name}: grids differ between states")
        out.append(_relative_term(b.values, a.values, a.grid.dx * dt, floor))
    return tuple(out)


def relative_error(prev: EquilibriumState, new: EquilibriumState, options: SolverOptions | None = None) -> float:
    """Total relative error ``E = E_VA + E_VB + E_fA + E_fB`` between two iterates."""
    return float(sum(residual_terms(prev, new, options)))


def initial_state(params: MarketParams, grids: MarketGrids) -> EquilibriumState:
    """Iterate 0: densities frozen at ``f0``, values frozen at the terminal utility."""
    bnd = _Boundary(params, grids)
    return EquilibriumState(
        V_A=SpaceTimeField.constant_in_time(grids.x, grids.t, bnd.h_A),
        V_B=SpaceTimeField.constant_in_time(grids.y, grids.t, bnd.h_B),
        f_A=SpaceTimeField.constant_in_time(grids.x, grids.t, bnd.f0_A),
        f_B=SpaceTimeField.constant_in_time(grids.y, grids.t, bnd.f0_B),
        iteration=0,
    )


def iterate_once(state: EquilibriumState, params: MarketParams, options: SolverOptions,
                 _boundary=None) -> EquilibriumState:
    """One full value + density sweep from iterate ``n`` to ``n + 1``."""
    grids = MarketGrids(state.V_A.grid, state.V_B.grid, state.V_A.time)
    bnd = _boundary or _Boundary(params, grids)
    terms = (
        coupling_terms(state.V_A, state.V_B, state.f_B, options.monotone_tol),
        coupling_terms(state.V_B, state.V_A, state.f_A, options.monotone_tol),
    )
    V_A, V_B = value_sweep(state, params, options, terms, bnd)
    f_A, f_B = density_sweep(state, params, options, terms, bnd)
    return EquilibriumState(
        V_A=SpaceTimeField(grids.x, grids.t, V_A),
        V_B=SpaceTimeField(grids.y, grids.t, V_B),
        f_A=SpaceTimeField(grids.x, grids.t, f_A),
        f_B=SpaceTimeField(grids.y, grids.t, f_B),
        iteration=state.iteration + 1,
        trace=state.trace,
    )


def solve_fixed_point(params: MarketParams, grids: MarketGrids, options: SolverOptions | None = None,
                      callback: Callable | None = None) -> EquilibriumState:
    """Iterate value and density sweeps until the relative error drops below ``options.tol``.

    Non-convergence is not an error: the last iterate is returned with
    ``converged=False``. ``callback(state)`` is called after every iteration.
    """
    options = options or SolverOptions()
    bnd = _Boundary(params, grids)
    state = initial_state(params, grids)
    trace: list = []
    state.trace = trace
    for _ in range(options.max_iters):
        new = iterate_once(state, params, options, bnd)
        terms = residual_terms(state, new, options)
        total = float(sum(terms))
        new.residual = total
        trace.append((new.iteration, total, *terms))
        state = new
        if callback is not None:
            callback(state)
        if total < options.tol:
            state.converged = True
            break
    logger.info("fixed point: %d iterations, residual %.3e, converged=%s",
                state.iteration, state.residual, state.converged)
    return state


def threshold_inverse(V: SpaceTimeField, x: float, t_index: int, monotone_tol: float = 1e-9):
    """Generalised inverse of the threshold ``V(., t)`` at level ``x``.

    Returns ``(y, flag)`` where ``flag`` is ``"ok"``, ``"empty"`` when
    ``x < V(0, t)`` (nobody accepts ``x``; ``y`` is NaN) or ``"clamped"``
    when ``x`` exceeds ``V(y_max, t)`` (``y = y_max``).
    """
    column = V.values[:, t_index]
    if _monotone_kind(column, monotone_tol) == "broken":
        raise SolverHealthError(f"threshold not monotone at time index {t_index}")
    nodes = V.grid.nodes
    if x < column[0]:
        return math.nan, "empty"
    if x > column[-1]:
        return float(nodes[-1]), "clamped"
    column = np.maximum.accumulate(column)
    # largest node with V <= x, then interpolate into the next cell
    j = int(np.searchsorted(column, x, side="right")) - 1
    if j >= nodes.size - 1 or column[j] == x:
        return float(nodes[j]), "ok"
    lo, hi = column[j], column[j + 1]
    w = (x - lo) / (hi - lo) if hi > lo else 0.0
    return float(nodes[j] + w * (nodes[j + 1] - nodes[j])), "ok"


def labor_market_params(density_A=None, density_B=None) -> MarketParams:
    """Labor-market parameter set: job seekers (A) against hiring firms (B)."""
    return MarketParams(
        side_A=MarketSideParams(intensity=20.0, running_slope=0.013, terminal_slope=0.6,
                                density=density_A or income.PUBLISHED_PLN),
        side_B=MarketSideParams(intensity=26.0, running_slope=0.05, terminal_slope=1.1,
                                density=density_B or income.PUBLISHED_GP),
        rho=0.04,
        horizon=1.0,
    )


class EquilibriumSolver(BaseEstimator):
    """Estimator-style wrapper around :func:`solve_fixed_point`.

    ``fit(params)`` solves the equilibrium for a :class:`MarketParams`;
    ``predict`` evaluates the fitted thresholds at ``(quality, time)`` pairs.
    """

    def __init__(self, x_max=7000.0, y_max=7000.0, n_a=200, n_b=200, n_t=200, tol=1e-4,
                 max_iters=5000, denominator_floor=1e-12, sweep_mode="jacobi", damping=1.0):
        self.x_max = x_max
        self.y_max = y_max
        self.n_a = n_a
        self.n_b = n_b
        self.n_t = n_t
        self.tol = tol
        self.max_iters = max_iters
        self.denominator_floor = denominator_floor
        self.sweep_mode = sweep_mode
        self.damping = damping

    def _options(self) -> SolverOptions:
        return SolverOptions(tol=self.tol, max_iters=self.max_iters, denominator_floor=self.denominator_floor,
                             sweep_mode=self.sweep_mode, damping=self.damping)

    def fit(self, params: MarketParams, y=None):
        if not isinstance(params, MarketParams):
            raise TypeError(f"fit expects MarketParams, got {type(params).__name__}")
        grids = MarketGrids.uniform(params.horizon, self.x_max, self.y_max, self.n_a, self.n_b, self.n_t)
        state = solve_fixed_point(params, grids, self._options())
        self.params_ = params
        self.grids_ = grids
        self.state_ = state
        self.n_iter_ = state.iteration
        self.residual_ = state.residual
        self.converged_ = state.converged
        return self

    def predict(self, X, side: str = "A"):
        """Thresholds at rows ``(quality, time)`` of ``X`` (time snapped to the left grid node)."""
        check_is_fitted(self, "state_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != 2:
            raise ValueError("X must have two columns: quality and time")
        V = self.state_.V_A if side == "A" else self.state_.V_B
        if np.any(X[:, 0] < 0) or np.any(X[:, 0] > V.grid.x_max):
            raise ValueError("quality outside the solver domain")
        out = np.empty(X.shape[0])
        for row, (q, t) in enumerate(X):
            k = min(int(math.floor(t / V.time.dt + 1e-12)), V.time.n_steps)
            out[row] = interpolate_many(V.values[:, k], V.grid.dx, np.array([q]))[0]
        return out

"""Finite-population simulation of the meeting and matching mechanism.

Each unmatched agent of side I carries an exponential clock of rate
``lam_J``. When it rings the agent meets one record drawn uniformly from the
whole side-J population. The meeting fails if the drawn agent is already
matched or if either party rejects the other's quality at the current
thresholds; otherwise the initiator is matched. In the default
``"mean_field"`` mode the drawn partner keeps its status (it is a sample of
the distribution); ``"physical"`` mode matches both.

All clocks are simulated jointly as one Poisson stream whose rate is the sum
of the individual rates; this is equivalent by memorylessness.

Two sampling modes are provided. ``"grid"`` places agents on the solver's
quality nodes with probabilities proportional to the discrete initial mass,
and scales meeting rates by the other side's discrete mass, so agent-level
hazards coincide with the ones the finite-difference scheme integrates.
``"continuous"`` draws qualities from the calibrated law truncated to the
grid domain and interpolates thresholds linearly in quality.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.stats import qmc

from . import income
from .solver import EquilibriumState, MarketParams

UNMATCHED_TIME = math.inf
OUTCOMES = ("matched", "failed_status", "failed_threshold")
MODES = ("mean_field", "physical")
SAMPLING = ("grid", "continuous")


@dataclass
class AgentPopulation:
    """Qualities and matching status of one side's finite population."""

    side: str
    qualities: np.ndarray
    node_index: np.ndarray
    node_weight: np.ndarray
    seed: int
    match_time: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.match_time is None:
            self.match_time = np.full(self.qualities.size, UNMATCHED_TIME)
        if np.any(self.qualities < 0):
            raise ValueError("qualities must be nonnegative")

    @property
    def size(self) -> int:
        return int(self.qualities.size)

    def matched(self, t: float = math.inf) -> np.ndarray:
        """Agents matched at or before ``t`` (default: by the end of the run)."""
        return np.isfinite(self.match_time) & (self.match_time <= t)

    def copy(self) -> "AgentPopulation":
        return AgentPopulation(self.side, self.qualities.copy(), self.node_index.copy(),
                               self.node_weight.copy(), self.seed, self.match_time.copy())


def _uniforms(n: int, seed: int, scheme: str) -> np.ndarray:
    if scheme == "iid":
        return np.random.default_rng(seed).random(n)
    if scheme == "sobol":
        return qmc.Sobol(d=1, scramble=True, seed=seed).random(n)[:, 0]
    raise ValueError(f"unknown uniform scheme {scheme!r}")


def sample_population(density, n: int, seed: int, side: str = "A", *, grid=None,
                      sampling: str = "continuous", scheme: str = "iid", u=None) -> AgentPopulation:
    """Draw ``n`` agent qualities from an initial law.

    ``density`` is an income parameter record (quantile access) or, in grid
    mode, anything accepted by :meth:`MarketSideParams.initial_density`.
    In continuous mode the law is truncated to ``[0, grid.x_max]`` when a
    grid is given. ``u`` overrides the uniforms (useful for testing).
    """
    if n < 1:
        raise ValueError(f"population size must be >= 1, got {n}")
    if sampling not in SAMPLING:
        raise ValueError(f"sampling must be one of {SAMPLING}")
    u = _uniforms(n, seed, scheme) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (n,)).copy()
    if sampling == "grid":
        if grid is None:
            raise ValueError("grid sampling requires a grid")
        w = _node_weights(density, grid)
        cdf = np.cumsum(w) / np.sum(w)
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), grid.n_cells)
        return AgentPopulation(side, grid.nodes[idx], idx.astype(np.int64), np.zeros(n), seed)
    if grid is not None:
        u = u * float(income.cdf(density, grid.x_max))
    q = np.atleast_1d(income.quantile(density, u)).astype(float)
    if grid is None:
        return AgentPopulation(side, q, np.zeros(n, dtype=np.int64), np.zeros(n), seed)
    pos = np.clip(q / grid.dx, 0.0, grid.n_cells)
    idx = np.minimum(pos.astype(np.int64), grid.n_cells - 1)
    return AgentPopulation(side, q, idx, pos - idx, seed)


def _node_weights(density, grid) -> np.ndarray:
    if hasattr(density, "family"):
        w = income.pdf(density, grid.nodes)
    elif callable(density):
        w = np.asarray(density(grid.nodes), dtype=float)
    else:
        w = np.asarray(density, dtype=float).copy()
    w = np.array(w, dtype=float)
    w[0] = 0.0
    if w.sum() <= 0:
        raise ValueError("initial density has no mass on the grid")
    return w


@numba.njit(cache=True)
def _threshold(V, node, weight, k):
    return (1.0 - weight) * V[node, k] + weight * V[node + 1, k] if weight > 0.0 else V[node, k]


@numba.njit(cache=True, nogil=True)
def _simulate(seed, horizon, dt, n_steps, rate_A, rate_B,
              qA, nodeA, wA, qB, nodeB, wB, VA, VB, physical,
              log_events, cap, matchA, matchB, ev_time, ev_side, ev_agent, ev_partner, ev_outcome):
    """Event loop; returns ``(n_events, n_logged, overflow)``.

    ``rate_A`` is the clock rate of each unmatched A agent (and ``rate_B``
    of each unmatched B agent).
    """
    np.random.seed(seed)
    nA = qA.size
    nB = qB.size
    freeA = np.arange(nA)
    freeB = np.arange(nB)
    posA = np.arange(nA)
    posB = np.arange(nB)
    uA = nA
    uB = nB
    t = 0.0
    n_events = 0
    n_log = 0
    overflow = False
    while True:
        total = uA * rate_A + uB * rate_B
        if total <= 0.0:
            break
        t += np.random.exponential(1.0 / total)
        if t >= horizon:
            break
        n_events += 1
        k = int(t / dt)
        if k > n_steps - 1:
            k = n_steps - 1
        if np.random.random() * total < uA * rate_A:
            side = 0
            s = freeA[np.random.randint(uA)]
            j = np.random.randint(nB)
            partner_q = qB[j]
            if matchB[j] <= t:
                outcome = 1
            elif partner_q >= _threshold(VA, nodeA[s], wA[s], k) and qA[s] >= _threshold(VB, nodeB[j], wB[j], k):
                outcome = 0
            else:
                outcome = 2
            if outcome == 0:
                matchA[s] = t
                p = posA[s]
                last = freeA[uA - 1]
                freeA[p] = last
                posA[last] = p
                uA -= 1
                if physical:
                    matchB[j] = t
                    p = posB[j]
                    last = freeB[uB - 1]
                    freeB[p] = last
                    posB[last] = p
                    uB -= 1
        else:
            side = 1
            s = freeB[np.random.randint(uB)]
            j = np.random.randint(nA)
            partner_q = qA[j]
            if matchA[j] <= t:
                outcome = 1
            elif partner_q >= _threshold(VB, nodeB[s], wB[s], k) and qB[s] >= _threshold(VA, nodeA[j], wA[j], k):
                outcome = 0
            else:
                outcome = 2
            if outcome == 0:
                matchB[s] = t
                p = posB[s]
                last = freeB[uB - 1]
                freeB[p] = last
                posB[last] = p
                uB -= 1
                if physical:
                    matchA[j] = t
                    p = posA[j]
                    last = freeA[uA - 1]
                    freeA[p] = last
                    posA[last] = p
                    uA -= 1
        if log_events:
            if n_log < cap:
                ev_time[n_log] = t
                ev_side[n_log] = side
                ev_agent[n_log] = s
                ev_partner[n_log] = partner_q
                ev_outcome[n_log] = outcome
                n_log += 1
            else:
                overflow = True
    return n_events, n_log, overflow


@dataclass
class SimConfig:
    n_agents: int
    seed: int
    solution: EquilibriumState
    params: MarketParams
    mode: str = "mean_field"
    sampling: str = "grid"
    scheme: str = "iid"
    log_events: bool = False
    #: rates of meeting; ``None`` scales by the discrete domain mass in grid mode
    scale_by_domain_mass: bool | None = None

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.sampling not in SAMPLING:
            raise ValueError(f"sampling must be one of {SAMPLING}")


@dataclass
class EventLog:
    time: np.ndarray
    side: np.ndarray
    agent: np.ndarray
    partner_quality: np.ndarray
    outcome: np.ndarray

    def __len__(self) -> int:
        return int(self.time.size)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "side", "agent_id", "partner_quality", "outcome"])
        for row in zip(self.time, self.side, self.agent, self.partner_quality, self.outcome):
            w.writerow([repr(float(row[0])), "AB"[row[1]], int(row[2]), repr(float(row[3])), OUTCOMES[row[4]]])
        return buf.getvalue()


@dataclass
class SimResult:
    pop_A: AgentPopulation
    pop_B: AgentPopulation
    n_events: int
    events: EventLog | None
    horizon: float


def _seed_streams(seed: int, n: int) -> list:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def simulate_market(config: SimConfig, pop_A: AgentPopulation | None = None,
                    pop_B: AgentPopulation | None = None) -> SimResult:
    """Run one replicate to the horizon under fixed thresholds."""
    sol, params = config.solution, config.params
    seed_A, seed_B, seed_run = _seed_streams(config.seed, 3)
    if pop_A is None:
        pop_A = sample_population(_law(params.side_A, config), config.n_agents, seed_A, "A",
                                  grid=sol.V_A.grid, sampling=config.sampling, scheme=config.scheme)
    if pop_B is None:
        pop_B = sample_population(_law(params.side_B, config), config.n_agents, seed_B, "B",
                                  grid=sol.V_B.grid, sampling=config.sampling, scheme=config.scheme)
    pop_A, pop_B = pop_A.copy(), pop_B.copy()
    time = sol.V_A.time
    scale = config.sampling == "grid" if config.scale_by_domain_mass is None else config.scale_by_domain_mass
    mass_A = float(sol.f_A.grid.dx * np.sum(sol.f_A.values[1:, 0])) if scale else 1.0
    mass_B = float(sol.f_B.grid.dx * np.sum(sol.f_B.values[1:, 0])) if scale else 1.0
    rate_A = params.side_B.intensity * mass_B
    rate_B = params.side_A.intensity * mass_A

    cap = 1 if not config.log_events else int(2 * (rate_A + rate_B) * time.horizon * config.n_agents + 1000)
    while True:
        ev = (np.empty(cap), np.empty(cap, np.int8), np.empty(cap, np.int64), np.empty(cap), np.empty(cap, np.int8))
        mA, mB = pop_A.match_time.copy(), pop_B.match_time.copy()
        n_events, n_log, overflow = _simulate(
            seed_run, time.horizon, time.dt, time.n_steps, rate_A, rate_B,
            pop_A.qualities, pop_A.node_index, pop_A.node_weight,
            pop_B.qualities, pop_B.node_index, pop_B.node_weight,
            np.ascontiguousarray(sol.V_A.values), np.ascontiguousarray(sol.V_B.values),
            config.mode == "physical", config.log_events, cap, mA, mB, *ev,
        )
        if not overflow:
            break
        cap *= 2
    pop_A.match_time, pop_B.match_time = mA, mB
    log = EventLog(*(a[:n_log] for a in ev)) if config.log_events else None
    return SimResult(pop_A, pop_B, int(n_events), log, time.horizon)


def _law(side_params, config: SimConfig):
    density = side_params.density
    if config.sampling == "continuous" and not hasattr(density, "family"):
        raise ValueError("continuous sampling needs a parametric initial law")
    return density


def node_bins(grid, population: AgentPopulation, n_bins: int = 20) -> np.ndarray:
    """Equal-count quality bins with edges on cell midpoints; returns edges."""
    q = np.sort(population.qualities)
    cuts = q[np.minimum((np.arange(1, n_bins) * q.size) // n_bins, q.size - 1)]
    # snap to the midpoint just above the node so nodes never sit on an edge
    mids = (np.floor(cuts / grid.dx) + 0.5) * grid.dx
    edges = np.unique(np.concatenate(([-0.5 * grid.dx], mids, [grid.x_max + 0.5 * grid.dx])))
    return edges


@dataclass
class SurvivalCurves:
    edges: np.ndarray
    times: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray

    @property
    def empty_bins(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 0)


def empirical_survival(populations, edges, times) -> SurvivalCurves:
    """Fraction of each quality bin still unmatched at each time, with binomial SEs.

    ``populations`` is one :class:`AgentPopulation` or a list of replicates,
    which are pooled.
    """
    if isinstance(populations, AgentPopulation):
        populations = [populations]
    q = np.concatenate([p.qualities for p in populations])
    mt = np.concatenate([p.match_time for p in populations])
    times = np.asarray(times, dtype=float)
    b = np.searchsorted(edges, q, side="right") - 1
    n_bins = edges.size - 1
    counts = np.bincount(b, minlength=n_bins)[:n_bins]
    order = np.argsort(b, kind="stable")
    surv = np.full((n_bins, times.size), np.nan)
    for i in range(n_bins):
        if counts[i] == 0:
            continue
        m = np.sort(mt[order][b[order] == i])
        alive = m.size - np.searchsorted(m, times, side="right")
        surv[i] = alive / m.size
    with np.errstate(invalid="ignore", divide="ignore"):
        se = np.sqrt(surv * (1.0 - surv) / counts[:, None])
    return SurvivalCurves(edges, times, surv, se, counts)


def pde_bin_survival(f, f0, edges) -> np.ndarray:
    """Survival per bin from the densities: ``sum f(., t) / sum f0`` over the bin's nodes."""
    nodes = f.grid.nodes
    b = np.searchsorted(edges, nodes, side="right") - 1
    out = np.full((edges.size - 1, f.time.size), np.nan)
    for i in range(edges.size - 1):
        m = (b == i)
        m[0] = False
        base = np.sum(f0[m])
        if base > 0:
            out[i] = np.sum(f.values[m], axis=0) / base
    return out


def pde_unmatched(f) -> np.ndarray:
    F = f.grid.dx * np.sum(f.values[1:], axis=0)
    return F / F[0]


def empirical_unmatched(populations, times) -> np.ndarray:
    if isinstance(populations, AgentPopulation):
        populations = [populations]
    mt = np.sort(np.concatenate([p.match_time for p in populations]))
    return (mt.size - np.searchsorted(mt, np.asarray(times), side="right")) / mt.size


@dataclass
class ComparisonReport:
    max_abs_dev_F: float
    max_abs_dev_F_A: float
    max_abs_dev_F_B: float
    fraction_within_3SE: float
    L1_survival_distance: float
    n_cells: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compare_to_pde(results, solution: EquilibriumState, params: MarketParams, n_bins: int = 20,
                   curves=None) -> ComparisonReport:
    """Compare pooled simulated survival with the densities of ``solution``.

    ``curves`` may supply precomputed ``(curves_A, curves_B)`` (for instance
    exact PDE survival, to test the comparison itself).
    """
    if isinstance(results, SimResult):
        results = [results]
    times = solution.V_A.time.nodes
    devs, within, l1, cells = [], 0, 0.0, 0
    for side, f, own in (("A", solution.f_A, params.side_A), ("B", solution.f_B, params.side_B)):
        pops = [getattr(r, f"pop_{side}") for r in results]
        f0 = own.initial_density(f.grid.nodes)
        if curves is None:
            edges = node_bins(f.grid, pops[0], n_bins)
            sc = empirical_survival(pops, edges, times)
            F_mc = empirical_unmatched(pops, times)
        else:
            sc = curves[0 if side == "A" else 1]
            edges = sc.edges
            F_mc = None
        ref = pde_bin_survival(f, f0, edges)
        F_pde = pde_unmatched(f)
        if F_mc is None:
            w = np.nan_to_num(sc.counts[:, None] * sc.survival)
            F_mc = w.sum(axis=0) / sc.counts.sum()
        devs.append(float(np.max(np.abs(F_mc - F_pde))))
        ok = np.isfinite(sc.survival) & np.isfinite(ref)
        diff = np.abs(sc.survival - ref)
        # exact agreement counts as within tolerance even where the SE is 0
        inside = (diff <= 3.0 * sc.stderr) | (diff <= 1e-12)
        within += int(np.sum(inside & ok))
        cells += int(np.sum(ok))
        weights = sc.counts / max(sc.counts.sum(), 1)
        l1 += float(np.sum(np.where(ok, diff, 0.0) * weights[:, None]) * solution.V_A.time.dt)
    return ComparisonReport(max(devs), devs[0], devs[1], within / cells if cells else 1.0, l1, cells)


def thread_count() -> int:
    env = os.environ.get("MEANMATCH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"MEANMATCH_THREADS must be an integer, got {env!r}") from None
    return max(1, min(8, os.cpu_count() or 1))


def replicates(config: SimConfig, n_replicates: int, threads: int | None = None) -> list:
    """Independent replicates with seeds spawned from ``config.seed``.

    Each replicate's outcome depends only on its own seed, so the result does
    not depend on the number of worker threads.
    """
    seeds = _seed_streams(config.seed, n_replicates)
    configs = [SimConfig(**{**config.__dict__, "seed": s}) for s in seeds]
    threads = threads or thread_count()
    if threads == 1 or n_replicates == 1:
        return [simulate_market(c) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(simulate_market, configs))

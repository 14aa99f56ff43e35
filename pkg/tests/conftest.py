import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from meanmatch.config import data_path, load_config
from meanmatch.grids import SpaceTimeField
from meanmatch.income import PUBLISHED_GP, PUBLISHED_PLN
from meanmatch.solver import (
    EquilibriumState,
    MarketGrids,
    MarketParams,
    MarketSideParams,
    SolverOptions,
    labor_market_params,
    solve_fixed_point,
)


def run_cli(*args, cwd=None):
    """Run the console entry point in a fresh interpreter; returns the completed process.

    Without ``cwd`` the command runs in a scratch directory so default outputs
    never land in the working tree.
    """
    with tempfile.TemporaryDirectory() as scratch:
        return subprocess.run([sys.executable, "-m", "meanmatch", *map(str, args)],
                              capture_output=True, text=True, cwd=cwd or scratch)


def start_cli(*args):
    return subprocess.Popen([sys.executable, "-m", "meanmatch", *map(str, args)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def small_grids(n=24, n_t=24, horizon=1.0, x_max=7000.0):
    return MarketGrids.uniform(horizon, x_max, x_max, n, n, n_t)


def no_match_params(rho=0.04):
    return MarketParams(
        side_A=MarketSideParams(20.0, 2 * rho, 2.0, PUBLISHED_PLN),
        side_B=MarketSideParams(26.0, 2 * rho, 2.0, PUBLISHED_GP),
        rho=rho, horizon=1.0,
    )


def decoupled_params():
    p = labor_market_params()
    p.side_A.intensity = 0.0
    p.side_B.intensity = 0.0
    return p


@pytest.fixture(scope="session")
def labor_params():
    return labor_market_params()


@pytest.fixture(scope="session")
def small_solution(labor_params):
    """Converged labor-market equilibrium on a coarse grid (damped for convergence)."""
    grids = small_grids(60, 60)
    state = solve_fixed_point(labor_params, grids, SolverOptions(damping=0.3, max_iters=4000))
    assert state.converged
    return state


@pytest.fixture(scope="session")
def no_match_solution():
    return solve_fixed_point(no_match_params(), small_grids(), SolverOptions())


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Full-resolution converged labor-market run written by ``meanmatch solve``.

    Undamped iteration does not reach the tolerance at this resolution, so the
    reference run uses damping 0.3.
    """
    out = tmp_path_factory.mktemp("reference_run")
    proc = run_cli("solve", "--config", data_path("labor_market_damped.json"), "--out", out, "--quiet")
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="session")
def reference_state(reference_run):
    from meanmatch.cli import load_run

    return load_run(reference_run)

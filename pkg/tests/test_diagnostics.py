import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import no_match_params, small_grids
from meanmatch import diagnostics as dg
from meanmatch.grids import SpaceTimeField, build_grid, build_time_grid


def f0_of(params, side, grid):
    own = params.side_A if side == "A" else params.side_B
    return own.initial_density(grid.nodes)


def test_unmatched_rate_normalised_initial_mass():
    g, t = build_grid(1.0, 10), build_time_grid(1.0, 3)
    f0 = np.ones(11)
    f = SpaceTimeField.constant_in_time(g, t, f0)
    assert dg.unmatched_rate(f, 0) == pytest.approx(1.0, rel=1e-15)


def test_no_match_rates_and_survival(no_match_solution):
    params = no_match_params()
    s = no_match_solution
    f0 = f0_of(params, "A", s.f_A.grid)
    F = dg.unmatched_series(s.f_A)
    assert np.all(F == F[0])
    surv = dg.survival_field(s.f_A, f0)
    assert np.all((surv[1:] == 1.0))
    for band in dg.band_series(s, params, "A", "survival", [(0.0, 0.5), (0.5, 1.0)]):
        assert np.all(band.values == 1.0)


def test_band_without_weighted_nodes_flagged(no_match_solution):
    # the coarse grid has no positive-density node in the lowest tenth of side B
    with pytest.raises(ValueError, match="no grid nodes"):
        dg.band_series(no_match_solution, no_match_params(), "B", "survival", [(0.0, 0.01), (0.01, 1.0)])


def test_unmatched_rate_behaviour_on_solution(small_solution):
    for f in (small_solution.f_A, small_solution.f_B):
        F = dg.unmatched_series(f)
        assert np.all(np.diff(F) <= 0)
        assert F[-1] > 0
        assert dg.unmatched_rate(f, 0) == pytest.approx(f.grid.dx * f.values[1:, 0].sum())


def test_unmatched_rate_equals_weighted_survival(small_solution, labor_params):
    f = small_solution.f_B
    f0 = f0_of(labor_params, "B", f.grid)
    for k in (0, 7, 30):
        # nodes with f0 = 0 carry no mass and have undefined survival
        idx = [i for i in range(1, f.grid.size) if f0[i] > 0]
        surv = np.array([dg.survival_probability(f, f0, i, k) for i in idx])
        assert dg.unmatched_rate(f, k) == pytest.approx(f.grid.dx * np.sum(surv * f0[idx]), rel=1e-12)


def test_survival_properties_and_sentinel(small_solution, labor_params):
    f = small_solution.f_A
    f0 = f0_of(labor_params, "A", f.grid)
    assert math.isnan(dg.survival_probability(f, f0, 0, 3))
    surv = dg.survival_field(f, f0)[1:]
    assert np.all(surv[:, 0] == 1.0)
    assert np.all((surv >= 0) & (surv <= 1))
    assert np.all(np.diff(surv, axis=1) <= 0)


def test_survival_geometric_decay():
    c, n_t = 1.7, 9
    g, t = build_grid(1.0, 4), build_time_grid(1.0, n_t)
    f0 = np.linspace(1.0, 2.0, 5)
    vals = f0[:, None] / (1.0 + c * t.dt) ** np.arange(n_t + 1)[None, :]
    f = SpaceTimeField(g, t, vals)
    for k in (0, 4, 9):
        assert dg.survival_probability(f, f0, 2, k) == pytest.approx((1.0 + c * t.dt) ** -k, rel=1e-14)


def test_partner_density_rejects_no_match(no_match_solution):
    params = no_match_params()
    for i in range(no_match_solution.f_A.grid.size):
        with pytest.raises(dg.InsufficientMatchedMass):
            dg.partner_density(no_match_solution, params, i, "A")


def test_partner_density_normalisation_and_support(small_solution, labor_params):
    s = small_solution
    checked = 0
    for side in ("A", "B"):
        V_self, V_other, f_self, _ = s.side(side)
        f0 = f0_of(labor_params, side, f_self.grid)
        for i in range(1, f_self.grid.size):
            if f0[i] - f_self.values[i, -1] <= dg.MASS_FLOOR:
                continue
            g = dg.partner_density(s, labor_params, i, side)
            assert np.all(g.values >= 0)
            assert abs(g.total - 1.0) <= 0.02
            # support lies inside the union of matching regions over time
            x = V_self.grid.nodes[i]
            member = np.zeros(g.nodes.size, dtype=bool)
            for k in range(V_self.time.n_steps):
                member |= (g.nodes >= V_self.values[i, k]) & (V_other.values[:, k] <= x)
            assert np.all(g.values[~member] == 0.0)
            checked += 1
    assert checked > 10


def test_partner_density_pure(small_solution, labor_params):
    a = dg.partner_density(small_solution, labor_params, 10, "A")
    b = dg.partner_density(small_solution, labor_params, 10, "A")
    assert np.array_equal(a.values, b.values)


def test_expected_partner_quality_consistency(small_solution, labor_params):
    g = dg.partner_density(small_solution, labor_params, 12, "B")
    e = dg.expected_partner_quality(small_solution, labor_params, 12, "B")
    assert e == pytest.approx(g.mean() / g.total, rel=1e-12)
    support = g.nodes[g.values > 0]
    assert support.min() <= e <= support.max()


def test_partner_mean_synthetic():
    y = np.linspace(0.0, 10.0, 101)
    point = np.zeros(101)
    point[37] = 10.0
    g = dg.PartnerDensity(1.0, y, point, 0.5)
    assert g.mean() / g.total == pytest.approx(y[37])
    uniform = np.where((y > 2.0) & (y <= 6.0), 1.0, 0.0)
    g = dg.PartnerDensity(1.0, y, uniform, 0.5)
    assert g.mean() / g.total == pytest.approx(4.0, abs=0.1)


def test_band_validation():
    with pytest.raises(ValueError):
        dg.validate_bands([(0.0, 0.5), (0.4, 1.0)])
    with pytest.raises(ValueError):
        dg.validate_bands([(0.0, 0.5)])
    assert dg.validate_bands(dg.DEFAULT_BANDS)[-1] == (0.8, 1.0)


def test_band_series_identities(small_solution, labor_params):
    s = small_solution
    for side in ("A", "B"):
        f = s.side(side)[2]
        f0 = f0_of(labor_params, side, f.grid)
        total = dg.band_series(s, labor_params, side, "unmatched_share", [(0.0, 1.0)])[0].values
        expected = dg.unmatched_series(f) / (f.grid.dx * f0[1:].sum())
        assert np.allclose(total, expected, rtol=1e-12)
        parts = dg.band_series(s, labor_params, side, "unmatched_share")
        assert np.allclose(sum(p.values for p in parts), total, rtol=1e-12, atol=1e-15)
        # survival averages recombine with f0 band weights
        surv = dg.band_series(s, labor_params, side, "survival")
        whole = dg.band_series(s, labor_params, side, "survival", [(0.0, 1.0)])[0].values
        _, masks = dg._band_masks(labor_params, side, f.grid, dg.DEFAULT_BANDS)
        weights = [f0[m].sum() / f0[1:].sum() for m in masks]
        assert np.allclose(sum(w * b.values for w, b in zip(weights, surv)), whole, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(cuts=st.lists(st.floats(0.05, 0.95), min_size=1, max_size=3, unique=True))
def test_band_partition_recombines(cuts, small_solution, labor_params):
    edges = [0.0] + sorted(cuts) + [1.0]
    if min(np.diff(edges)) < 0.05:
        return
    bands = list(zip(edges[:-1], edges[1:]))
    # bands without grid nodes hold no mass, so dropping them keeps the identity
    parts = dg.band_series(small_solution, labor_params, "A", "unmatched_share", bands, skip_empty=True)
    whole = dg.band_series(small_solution, labor_params, "A", "unmatched_share", [(0.0, 1.0)])[0]
    assert np.allclose(sum(p.values for p in parts), whole.values, rtol=1e-12)


def test_export_contract_and_determinism(tmp_path, small_solution, labor_params):
    cfg = {"seed": 1}
    m1 = dg.export_figure_data(small_solution, labor_params, tmp_path / "a", cfg)
    dg.export_figure_data(small_solution, labor_params, tmp_path / "b", cfg)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(dg.FIGURE_FILES + ("manifest.json",))
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    first = (tmp_path / "a" / "F.csv").read_text().splitlines()[0]
    assert first == f"# generated-by meanmatch {dg.__version__} config-hash {m1['config_hash']}"
    assert json.loads((tmp_path / "a" / "manifest.json").read_text()) == m1


def test_export_no_match_F_is_one(tmp_path, no_match_solution):
    dg.export_figure_data(no_match_solution, no_match_params(), tmp_path)
    with open(tmp_path / "F.csv") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    for row in rows[1:]:
        assert abs(float(row[1]) - 1.0) <= 1e-12 and abs(float(row[2]) - 1.0) <= 1e-12


def test_export_reports_unwritable_path(tmp_path, no_match_solution):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        dg.export_figure_data(no_match_solution, no_match_params(), blocker / "sub")

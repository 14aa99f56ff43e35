"""Quantities derived from a solved equilibrium, plus CSV export of figure data.

Everything here is a pure function of the solved state and the market
parameters; time integrals use the same right-endpoint rule as the solver.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import content_hash
from .grids import format_number
from .solver import EquilibriumState, MarketParams

DEFAULT_BANDS = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))
MASS_FLOOR = 1e-6
#: returned by :func:`survival_probability` where the initial density vanishes
SURVIVAL_UNDEFINED = float("nan")
FIGURE_FILES = ("VA_slices.csv", "VB_slices.csv", "fA_slices.csv", "fB_slices.csv",
                "F.csv", "ratio.csv", "gA_bands.csv", "gB_bands.csv")


class InsufficientMatchedMass(ValueError):
    """The matched mass at a quality level is too small for a conditional density."""

    def __init__(self, x_index: int, matched_mass: float, floor: float):
        self.x_index, self.matched_mass, self.floor = x_index, matched_mass, floor
        super().__init__(f"insufficient matched mass at node {x_index}: {matched_mass:.3e} <= {floor:.1e}")


def unmatched_rate(f, t_index: int) -> float:
    """Share of the side still unmatched at ``t_index`` (right-endpoint mass of ``f``)."""
    return float(f.grid.dx * np.sum(f.values[1:, t_index]))


def unmatched_series(f) -> np.ndarray:
    return f.grid.dx * np.sum(f.values[1:, :], axis=0)


def survival_probability(f, f0, x_index: int, t_index: int) -> float:
    """``f(x, t) / f0(x)``; :data:`SURVIVAL_UNDEFINED` where ``f0(x) == 0``."""
    base = float(np.asarray(f0)[x_index])
    if base <= 0.0:
        return SURVIVAL_UNDEFINED
    return float(f.values[x_index, t_index] / base)


def survival_field(f, f0) -> np.ndarray:
    f0 = np.asarray(f0, dtype=float)
    out = np.full(f.values.shape, SURVIVAL_UNDEFINED)
    ok = f0 > 0
    out[ok] = f.values[ok] / f0[ok, None]
    return out


@dataclass
class PartnerDensity:
    """Conditional density of the partner's quality given a match before the horizon."""

    own_quality: float
    nodes: np.ndarray
    values: np.ndarray
    matched_mass: float

    @property
    def total(self) -> float:
        return float((self.nodes[1] - self.nodes[0]) * np.sum(self.values[1:]))

    def mean(self) -> float:
        d = self.nodes[1] - self.nodes[0]
        return float(d * np.sum(self.nodes[1:] * self.values[1:]))


def _side_fields(solution: EquilibriumState, params: MarketParams, side: str):
    V_self, V_other, f_self, f_other = solution.side(side)
    own, other = (params.side_A, params.side_B) if side == "A" else (params.side_B, params.side_A)
    return V_self, V_other, f_self, f_other, own, other


def partner_density(solution: EquilibriumState, params: MarketParams, x_index: int, side: str = "A",
                    mass_floor: float = MASS_FLOOR) -> PartnerDensity:
    """Density of the partner's quality for an agent of quality ``x`` on ``side``.

    Raises :class:`InsufficientMatchedMass` when ``f0(x) - f(x, T)`` does not
    exceed ``mass_floor``.
    """
    V_self, V_other, f_self, f_other, own, other = _side_fields(solution, params, side)
    x = V_self.grid.nodes[x_index]
    f0 = own.initial_density(V_self.grid.nodes)[x_index]
    matched = float(f0 - f_self.values[x_index, -1])
    if not matched > mass_floor:
        raise InsufficientMatchedMass(x_index, matched, mass_floor)
    y = V_other.grid.nodes
    dt = V_self.time.dt
    acc = np.zeros(y.size)
    # same pairing as the density sweep: own density at t_{k+1}, region and
    # partner density at t_k, so the total matches f0 - f(T) at a fixed point
    for k in range(V_self.time.n_steps):
        thr = V_self.values[x_index, k]
        member = (y >= thr) & (V_other.values[:, k] <= x)
        member[0] = False
        acc += f_self.values[x_index, k + 1] * f_other.values[:, k] * member
    values = other_intensity(params, side) * acc * dt / matched
    return PartnerDensity(float(x), y.copy(), values, matched)


def other_intensity(params: MarketParams, side: str) -> float:
    return params.side_B.intensity if side == "A" else params.side_A.intensity


def expected_partner_quality(solution: EquilibriumState, params: MarketParams, x_index: int,
                             side: str = "A", mass_floor: float = MASS_FLOOR) -> float:
    """Mean partner quality conditional on matching before the horizon."""
    g = partner_density(solution, params, x_index, side, mass_floor)
    return g.mean() / g.total


@dataclass
class BandSummary:
    band: tuple
    times: np.ndarray
    values: np.ndarray
    n_nodes: int


def band_edges(params: MarketParams, side: str, grid, bands=DEFAULT_BANDS) -> list:
    """Quality cut points of each percentile band under the discrete initial measure."""
    own = params.side_A if side == "A" else params.side_B
    w = own.initial_density(grid.nodes).copy()
    w[0] = 0.0
    cdf = np.cumsum(w) / np.sum(w)
    return [(float(np.interp(lo, cdf, grid.nodes)), float(np.interp(hi, cdf, grid.nodes))) for lo, hi in bands]


def _band_masks(params, side, grid, bands):
    own = params.side_A if side == "A" else params.side_B
    w = own.initial_density(grid.nodes).copy()
    w[0] = 0.0
    cdf = np.cumsum(w) / np.sum(w)
    masks = []
    for lo, hi in bands:
        # node belongs to the band containing its cumulative share (right-closed)
        m = (cdf > lo) if lo > 0 else np.ones(cdf.size, dtype=bool)
        if hi < 1.0:
            m &= cdf <= hi
        # nodes without initial mass carry no population weight
        m &= w > 0
        masks.append(m)
    return w, masks


def validate_bands(bands) -> list:
    bands = [tuple(map(float, b)) for b in bands]
    if not bands:
        raise ValueError("at least one band is required")
    prev = 0.0
    for lo, hi in bands:
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"invalid band {(lo, hi)}")
        if not math.isclose(lo, prev, abs_tol=1e-12):
            raise ValueError("bands must partition (0, 1) in increasing order without gaps or overlap")
        prev = hi
    if not math.isclose(prev, 1.0, abs_tol=1e-12):
        raise ValueError("bands must cover (0, 1)")
    return bands


def band_series(solution: EquilibriumState, params: MarketParams, side: str, quantity: str = "survival",
                bands=DEFAULT_BANDS, skip_empty: bool = False) -> list:
    """Initial-population-weighted band averages of a pointwise quantity over time.

    ``quantity`` is ``"survival"``, the band average of ``f / f0`` weighted
    by ``f0``, or ``"unmatched_share"``, the band's unmatched mass divided by
    the total initial mass (so shares of all bands add up to the unmatched
    rate over the initial mass). A band without weighted grid nodes raises
    ``ValueError`` unless ``skip_empty`` is set, in which case it is left out.
    """
    if quantity not in ("survival", "unmatched_share"):
        raise ValueError(f"unknown quantity {quantity!r}")
    bands = validate_bands(bands)
    _, _, f_self, _, _, _ = _side_fields(solution, params, side)
    w, masks = _band_masks(params, side, f_self.grid, bands)
    out = []
    for band, m in zip(bands, masks):
        if not m.any():
            if skip_empty:
                continue
            raise ValueError(f"band {band} contains no grid nodes with initial mass")
        # f0-weighted average of f/f0 is sum(f)/sum(f0) over the band
        denom = np.sum(w[m]) if quantity == "survival" else np.sum(w)
        values = np.sum(f_self.values[m], axis=0) / denom
        out.append(BandSummary(band, f_self.time.nodes.copy(), values, int(m.sum())))
    return out


def config_hash(config) -> str:
    """Content hash of a configuration mapping (or of an already canonical string)."""
    if isinstance(config, str):
        return hashlib.sha256(config.encode("utf-8")).hexdigest()
    return content_hash(config)


def header_comment(hash_hex: str) -> str:
    return f"generated-by meanmatch {__version__} config-hash {hash_hex}"


def _write_rows(path: Path, comment: str, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else format_number(v) for v in row])
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _slice_indices(n_steps: int, n_slices: int = 5) -> list:
    return sorted({int(round(j * n_steps / (n_slices - 1))) for j in range(n_slices)})


def export_figure_data(solution: EquilibriumState, params: MarketParams, out_dir, config=None,
                       bands=DEFAULT_BANDS) -> dict:
    """Write the CSV files behind the standard figures and a ``manifest.json``.

    Returns the manifest dictionary. Output is a deterministic function of
    the inputs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    chash = config_hash(config if config is not None else {})
    comment = header_comment(chash)
    time = solution.V_A.time
    ks = _slice_indices(time.n_steps)
    entries = {}

    for fname, fld in (("VA_slices.csv", solution.V_A), ("VB_slices.csv", solution.V_B),
                       ("fA_slices.csv", solution.f_A), ("fB_slices.csv", solution.f_B)):
        header = ["x"] + [f"t={format_number(time.nodes[k])}" for k in ks]
        rows = ([x] + [fld.values[i, k] for k in ks] for i, x in enumerate(fld.grid.nodes))
        _write_rows(out / fname, comment, header, rows)
        entries[fname] = {"kind": "slices", "time_indices": ks}

    F_A, F_B = unmatched_series(solution.f_A), unmatched_series(solution.f_B)
    _write_rows(out / "F.csv", comment, ["t", "F_A", "F_B"], zip(time.nodes, F_A / F_A[0], F_B / F_B[0]))
    entries["F.csv"] = {"kind": "unmatched_rate", "normalised_by": "initial discrete mass"}

    ratio_rows = []
    for side in ("A", "B"):
        for summary in band_series(solution, params, side, "survival", bands, skip_empty=True):
            for t, v in zip(summary.times, summary.values):
                ratio_rows.append([side, f"{summary.band[0]:g}-{summary.band[1]:g}", t, v])
    _write_rows(out / "ratio.csv", comment, ["side", "band", "t", "survival"], ratio_rows)
    entries["ratio.csv"] = {"kind": "band_survival", "bands": [list(b) for b in bands]}

    for side, fname in (("A", "gA_bands.csv"), ("B", "gB_bands.csv")):
        rows = _partner_band_rows(solution, params, side, bands)
        _write_rows(out / fname, comment, ["band", "x_index", "x", "y", "g"], rows)
        entries[fname] = {"kind": "partner_density", "bands": [list(b) for b in bands],
                          "mass_floor": MASS_FLOOR}

    manifest = {"generator": "meanmatch", "version": __version__, "config_hash": chash,
                "files": [{"name": name, **meta} for name, meta in entries.items()]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _partner_band_rows(solution, params, side, bands) -> list:
    """Partner density at the node closest to each band's median quality."""
    _, _, f_self, _, _, _ = _side_fields(solution, params, side)
    grid = f_self.grid
    w, masks = _band_masks(params, side, grid, bands)
    cdf = np.cumsum(w) / np.sum(w)
    rows = []
    for (lo, hi), m in zip(bands, masks):
        if not m.any():
            continue
        mid = 0.5 * (lo + hi)
        candidates = np.flatnonzero(m)
        i = int(candidates[np.argmin(np.abs(cdf[candidates] - mid))])
        label = f"{lo:g}-{hi:g}"
        try:
            g = partner_density(solution, params, i, side)
        except InsufficientMatchedMass:
            rows.append([label, str(i), grid.nodes[i], "nan", "nan"])
            continue
        rows.extend([label, str(i), grid.nodes[i], y, v] for y, v in zip(g.nodes, g.values))
    return rows


__all__ = [
    "BandSummary", "DEFAULT_BANDS", "FIGURE_FILES", "InsufficientMatchedMass", "PartnerDensity",
    "SURVIVAL_UNDEFINED", "band_edges", "band_series", "config_hash", "expected_partner_quality",
    "export_figure_data", "partner_density", "survival_probability", "unmatched_rate",
]

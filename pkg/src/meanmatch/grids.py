"""Uniform space/time grids, grid fields, and the right-endpoint quadrature.

Every module works on the same pair of uniform grids: a quality grid
``x_0 = 0 < x_1 < ... < x_N = x_max`` and a time grid ``t_0 = 0 < ... < t_Nt = T``.
Fields are stored with shape ``(N + 1, Nt + 1)`` and indexed ``(space, time)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_finite_array, check_int_at_least, check_positive

#: corner cell of the field CSV header: qualities run down, times run across
CSV_CORNER = "x\\t"


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform partition of ``[0, x_max]`` into ``n_cells`` intervals."""

    x_max: float
    n_cells: int

    def __post_init__(self):
        check_positive(self.x_max, "x_max")
        check_int_at_least(self.n_cells, 2, "n_cells")

    @property
    def dx(self) -> float:
        return self.x_max / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.n_cells + 1, dtype=float) * self.dx
        nodes[-1] = self.x_max
        return nodes

    @property
    def size(self) -> int:
        return self.n_cells + 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, horizon]`` into ``n_steps`` intervals."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        check_positive(self.horizon, "horizon")
        check_int_at_least(self.n_steps, 1, "n_steps")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.n_steps + 1, dtype=float) * self.dt
        nodes[-1] = self.horizon
        return nodes

    @property
    def size(self) -> int:
        return self.n_steps + 1

    def left_index(self, t: float) -> int:
        """Index of the grid time at or immediately before ``t`` (clamped to the last interval)."""
        k = int(np.floor(t / self.dt))
        return min(max(k, 0), self.n_steps - 1)


def build_grid(x_max: float, n_cells: int) -> SpatialGrid:
    """Return the uniform quality grid on ``[0, x_max]`` with ``n_cells`` intervals.

    >>> build_grid(1.0, 2).nodes
    array([0. , 0.5, 1. ])
    """
    return SpatialGrid(float(x_max), n_cells)


def build_time_grid(horizon: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(horizon), n_steps)


@dataclass
class SpaceTimeField:
    """Real values on a (quality x time) grid, indexed ``values[i, k]``."""

    grid: SpatialGrid
    time: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.size, self.time.size)
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} does not match grids {expected}")

    @classmethod
    def constant_in_time(cls, grid: SpatialGrid, time: TimeGrid, profile) -> "SpaceTimeField":
        profile = np.asarray(profile, dtype=float)
        return cls(grid, time, np.repeat(profile[:, None], time.size, axis=1))

    def copy(self) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.time, self.values.copy())

    def slice(self, t_index: int) -> np.ndarray:
        return self.values[:, t_index]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def interpolate_time_slice(field: SpaceTimeField, x: float, t_index: int) -> float:
    """Piecewise-linear interpolation of ``field`` in quality at a fixed time index."""
    grid = field.grid
    if not 0.0 <= x <= grid.x_max:
        raise ValueError(f"x={x!r} outside [0, {grid.x_max}]")
    if not 0 <= t_index < field.time.size:
        raise IndexError(f"t_index {t_index} out of range")
    column = field.values[:, t_index]
    pos = x / grid.dx
    i = min(int(pos), grid.n_cells - 1)
    w = pos - i
    if w == 0.0:
        return float(column[i])
    if w == 1.0:
        return float(column[i + 1])
    return float((1.0 - w) * column[i] + w * column[i + 1])


def interpolate_many(column: np.ndarray, dx: float, x: np.ndarray) -> np.ndarray:
    """Vectorised version of :func:`interpolate_time_slice` for one column."""
    n_cells = column.shape[0] - 1
    pos = np.asarray(x, dtype=float) / dx
    i = np.minimum(pos.astype(np.int64), n_cells - 1)
    w = pos - i
    return (1.0 - w) * column[i] + w * column[i + 1]


def riemann_sum_right(values, dx: float) -> float:
    """``dx * sum(values)`` where ``values`` holds nodes ``1..N`` (node 0 excluded).

    >>> riemann_sum_right([0.25, 0.5, 0.75, 1.0], 0.25)
    0.625
    """
    values = check_finite_array(values, "values")
    return float(dx * np.sum(values))


def riemann_sum_right_nodes(values, dx: float, axis: int = 0):
    """Right-endpoint sum over a full node array (drops index 0 along ``axis``)."""
    values = np.asarray(values, dtype=float)
    return dx * np.sum(np.take(values, np.arange(1, values.shape[axis]), axis=axis), axis=axis)


def format_number(value: float) -> str:
    return format(float(value), ".17g")


def field_to_csv(field: SpaceTimeField, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([CSV_CORNER] + [format_number(t) for t in field.time.nodes])
    for x, row in zip(field.grid.nodes, field.values):
        writer.writerow([format_number(x)] + [format_number(v) for v in row])
    return buf.getvalue()


def write_field_csv(field: SpaceTimeField, path, comment: str | None = None) -> Path:
    path = Path(path)
    path.write_text(field_to_csv(field, comment), encoding="utf-8")
    return path


def read_field_csv(path) -> SpaceTimeField:
    """Inverse of :func:`write_field_csv`; grids are rebuilt from the header and first column."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    times = np.array([float(v) for v in rows[0][1:]])
    body = np.array([[float(v) for v in row] for row in rows[1:]])
    xs = body[:, 0]
    grid = build_grid(xs[-1], len(xs) - 1)
    time = build_time_grid(times[-1], len(times) - 1)
    return SpaceTimeField(grid, time, body[:, 1:])

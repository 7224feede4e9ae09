"""Ego-centric occupancy grid, per-cell Kalman occupancy flow, and prediction.

Grid convention follows images: row index i grows downward (decreasing lateral
y), column index j grows to the right (increasing longitudinal x).  Per-cell
flow is estimated in cells/frame: v_y moves rows, v_x moves columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

OCCUPANCY_THRESHOLD = 0.5


@dataclass(frozen=True)
class GridSpec:
    """Fixed-size ego-anchored grid geometry.

    ego_row / ego_col are the (possibly fractional) grid indices of the ego
    center.  Defaults put the ego midway between the two middle rows and at
    the center of column 0, so column centers sit at multiples of cell_size
    ahead of the ego (planner steps that are multiples of the cell size then
    map onto column centers exactly).
    """

    n_rows: int
    n_cols: int
    cell_size: float
    ego_row: float | None = None
    ego_col: float = 0.0

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one row and column")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.ego_row is None:
            object.__setattr__(self, "ego_row", (self.n_rows - 1) / 2.0)

    def row_lateral_coords(self) -> np.ndarray:
        """Lateral (y) coordinate of each row center, ego frame, meters."""
        return (self.ego_row - np.arange(self.n_rows)) * self.cell_size

    def col_longitudinal_coords(self) -> np.ndarray:
        """Longitudinal (x) coordinate of each column center, meters."""
        return (np.arange(self.n_cols) - self.ego_col) * self.cell_size

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """Nearest (row, col) for an ego-frame point; may lie outside grid."""
        i = int(round(self.ego_row - y / self.cell_size))
        j = int(round(x / self.cell_size + self.ego_col))
        return i, j

    def contains(self, i: int, j: int) -> bool:
        return 0 <= i < self.n_rows and 0 <= j < self.n_cols


@dataclass
class EgoGrid:
    spec: GridSpec
    cells: np.ndarray  # (n_rows, n_cols) occupancy in [0, 1]

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.shape != (self.spec.n_rows, self.spec.n_cols):
            raise ValueError("cell array shape does not match spec")
        if self.cells.min() < 0.0 or self.cells.max() > 1.0:
            raise ValueError("occupancy values must lie in [0, 1]")

    @classmethod
    def empty(cls, spec: GridSpec) -> "EgoGrid":
        return cls(spec, np.zeros((spec.n_rows, spec.n_cols)))

    @property
    def row_lateral_coords(self) -> np.ndarray:
        return self.spec.row_lateral_coords()

    def binarized(self, threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
        return (self.cells >= threshold).astype(float)

    def mirrored(self) -> "EgoGrid":
        """Reflection across y = 0 (valid for symmetric specs)."""
        return EgoGrid(self.spec, self.cells[::-1].copy())


@dataclass
class WorldScene:
    """Simulation ground truth: world-frame obstacles and dynamic agents."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    # (position (2,), velocity (2,)) pairs, world frame, meters and m/frame
    agents: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scene geometry must be finite")

    def obstacle_point_sets(self, frames_ahead: float = 0.0) -> list[np.ndarray]:
        """One point array per obstacle (so noise can shift obstacles rigidly)."""
        sets = [p[None, :] for p in self.points]
        for xmin, ymin, xmax, ymax in self.boxes:
            step = 0.1
            xs = np.arange(xmin, xmax + step / 2, step)
            ys = np.arange(ymin, ymax + step / 2, step)
            gx, gy = np.meshgrid(xs, ys)
            sets.append(np.column_stack([gx.ravel(), gy.ravel()]))
        for pos, vel in self.agents:
            sets.append((np.asarray(pos) + frames_ahead * np.asarray(vel))[None, :])
        return sets

    def all_points(self, frames_ahead: float = 0.0) -> np.ndarray:
        sets = self.obstacle_point_sets(frames_ahead)
        return np.vstack(sets) if sets else np.zeros((0, 2))


def project_to_ego(
    scene: WorldScene,
    ego_pose: tuple[float, float, float],
    spec: GridSpec,
    noise_bound: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    frames_ahead: float = 0.0,
) -> EgoGrid:
    """Rasterize world obstacles into the ego-centric grid.

    Each obstacle point marks its covering cell; obstacles outside the grid
    footprint are dropped.  Optional bounded-uniform displacement noise is
    applied per obstacle point before rasterization (deterministic for a
    given rng state).
    """
    ex, ey, eh = ego_pose
    sets = scene.obstacle_point_sets(frames_ahead)
    grid = EgoGrid.empty(spec)
    if not sets:
        return grid
    if noise_bound > 0.0:
        if rng is None:
            rng = np.random.default_rng()
        # one rigid displacement per obstacle
        sets = [pts + rng.uniform(-noise_bound, noise_bound, size=2)
                for pts in sets]
    pts = np.vstack(sets)
    c, s = np.cos(-eh), np.sin(-eh)
    rel = pts - np.array([ex, ey])
    local = np.column_stack([c * rel[:, 0] - s * rel[:, 1],
                             s * rel[:, 0] + c * rel[:, 1]])
    rows = np.rint(spec.ego_row - local[:, 1] / spec.cell_size).astype(int)
    cols = np.rint(local[:, 0] / spec.cell_size + spec.ego_col).astype(int)
    inside = (rows >= 0) & (rows < spec.n_rows) & (cols >= 0) & (cols < spec.n_cols)
    grid.cells[rows[inside], cols[inside]] = 1.0
    return grid


@dataclass
class FlowField:
    """Per-cell occupancy-flow estimate with scalar Kalman state per axis."""

    v_x: np.ndarray
    v_y: np.ndarray
    p_x: np.ndarray
    p_y: np.ndarray
    q: float = 0.01          # process noise variance
    r: float = 1.0           # measurement noise variance
    v_max: float = 3.0       # cells/frame clip
    p_floor: float = 1e-3
    activity_threshold: float = OCCUPANCY_THRESHOLD

    @classmethod
    def initial(cls, spec: GridSpec, p0: float = 1.0, **kwargs) -> "FlowField":
        shape = (spec.n_rows, spec.n_cols)
        return cls(
            v_x=np.zeros(shape), v_y=np.zeros(shape),
            p_x=np.full(shape, p0), p_y=np.full(shape, p0),
            **kwargs,
        )


@dataclass
class FlowMeasurement:
    mask: np.ndarray  # bool, True where a measurement exists
    z_x: np.ndarray
    z_y: np.ndarray


def flow_measure(
    prev: EgoGrid, curr: EgoGrid, flow: FlowField, dt: float = 1.0
) -> FlowMeasurement:
    """3x3 local-search flow measurement for all active cells of `prev`.

    Predict the integer landing index from the current velocity estimate,
    clamp to the grid, then pick the highest-occupancy cell in the 3x3
    neighborhood; ties go to the smallest displacement magnitude, then
    row-major order.
    """
    if prev.spec != curr.spec:
        raise ValueError("grids must share one spec")
    n_rows, n_cols = prev.cells.shape
    mask = prev.cells >= flow.activity_threshold
    z_x = np.zeros_like(prev.cells)
    z_y = np.zeros_like(prev.cells)
    for i, j in zip(*np.nonzero(mask)):
        ih = min(max(int(round(i + flow.v_y[i, j] * dt)), 0), n_rows - 1)
        jh = min(max(int(round(j + flow.v_x[i, j] * dt)), 0), n_cols - 1)
        best = None
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ii, jj = ih + di, jh + dj
                if not (0 <= ii < n_rows and 0 <= jj < n_cols):
                    continue
                occ = curr.cells[ii, jj]
                disp = (ii - i, jj - j)
                key = (-occ, disp[0] ** 2 + disp[1] ** 2, ii, jj)
                if best is None or key < best[0]:
                    best = (key, disp)
        di_star, dj_star = best[1]
        z_y[i, j] = di_star / dt
        z_x[i, j] = dj_star / dt
    return FlowMeasurement(mask=mask, z_x=z_x, z_y=z_y)


def flow_update(flow: FlowField, z: FlowMeasurement) -> FlowField:
    """Scalar Kalman update per measured cell and axis, then clip and floor."""
    out = replace(
        flow,
        v_x=flow.v_x.copy(), v_y=flow.v_y.copy(),
        p_x=flow.p_x.copy(), p_y=flow.p_y.copy(),
    )
    m = z.mask
    for v, p, meas in ((out.v_x, out.p_x, z.z_x), (out.v_y, out.p_y, z.z_y)):
        p[m] += flow.q
        gain = p[m] / (p[m] + flow.r)
        v[m] += gain * (meas[m] - v[m])
        p[m] *= 1.0 - gain
    np.clip(out.v_x, -flow.v_max, flow.v_max, out=out.v_x)
    np.clip(out.v_y, -flow.v_max, flow.v_max, out=out.v_y)
    np.maximum(out.p_x, flow.p_floor, out=out.p_x)
    np.maximum(out.p_y, flow.p_floor, out=out.p_y)
    return out


def flow_smooth(history: Sequence[FlowField], window: int) -> FlowField:
    """Moving-average smoothing of velocities over the newest `window` fields.

    Variances are taken from the newest field.
    """
    if not history:
        raise ValueError("history must be non-empty")
    recent = history[-window:]
    newest = history[-1]
    return replace(
        newest,
        v_x=np.mean([f.v_x for f in recent], axis=0),
        v_y=np.mean([f.v_y for f in recent], axis=0),
        p_x=newest.p_x.copy(),
        p_y=newest.p_y.copy(),
    )


def predict_occupancy(grid: EgoGrid, flow: FlowField, steps_ahead: float) -> EgoGrid:
    """Constant-velocity relocation of occupancy mass; collisions merge by max."""
    n_rows, n_cols = grid.cells.shape
    out = EgoGrid.empty(grid.spec)
    for i, j in zip(*np.nonzero(grid.cells > 0.0)):
        ii = min(max(int(round(i + flow.v_y[i, j] * steps_ahead)), 0), n_rows - 1)
        jj = min(max(int(round(j + flow.v_x[i, j] * steps_ahead)), 0), n_cols - 1)
        out.cells[ii, jj] = max(out.cells[ii, jj], grid.cells[i, j])
    return out


def save_grid(grid: EgoGrid, path) -> None:
    """Plain-text snapshot: header line, then one row of values per line."""
    spec = grid.spec
    with open(path, "w") as fh:
        fh.write(f"{spec.n_rows} {spec.n_cols} {spec.cell_size} "
                 f"{spec.ego_row} {spec.ego_col}\n")
        for row in grid.cells:
            fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def load_grid(path) -> EgoGrid:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5:
            raise ValueError("malformed grid snapshot header")
        n_rows, n_cols = int(header[0]), int(header[1])
        spec = GridSpec(n_rows, n_cols, float(header[2]),
                        float(header[3]), float(header[4]))
        cells = np.loadtxt(fh, ndmin=2)
    return EgoGrid(spec, cells)

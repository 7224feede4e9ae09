"""Grid geometry, rasterization, and the per-cell occupancy-flow filter."""

import math

import numpy as np
import pytest

from onrap.occupancy import (
    EgoGrid,
    FlowField,
    GridSpec,
    WorldScene,
    flow_measure,
    flow_smooth,
    flow_update,
    load_grid,
    predict_occupancy,
    project_to_ego,
    save_grid,
)

SPEC = GridSpec(n_rows=8, n_cols=12, cell_size=0.5)


def test_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 4, 0.5)
    with pytest.raises(ValueError):
        GridSpec(4, 4, 0.0)


def test_row_coords_symmetric_and_descending():
    ys = SPEC.row_lateral_coords()
    assert len(ys) == 8
    assert np.allclose(ys, -ys[::-1])          # symmetric about y = 0
    assert np.all(np.diff(ys) < 0)             # row index grows downward
    assert ys[0] == pytest.approx(3.5 * 0.5)


def test_column_centers_at_cell_multiples():
    xs = SPEC.col_longitudinal_coords()
    assert xs[0] == pytest.approx(0.0)
    assert np.allclose(np.diff(xs), 0.5)


def test_cell_of_roundtrip():
    for i in range(SPEC.n_rows):
        for j in range(SPEC.n_cols):
            x = SPEC.col_longitudinal_coords()[j]
            y = SPEC.row_lateral_coords()[i]
            assert SPEC.cell_of(x, y) == (i, j)


def test_grid_value_validation():
    with pytest.raises(ValueError):
        EgoGrid(SPEC, np.full((8, 12), 1.5))
    with pytest.raises(ValueError):
        EgoGrid(SPEC, np.zeros((3, 3)))


def test_mirrored_swaps_lateral_sign():
    g = EgoGrid.empty(SPEC)
    i, j = SPEC.cell_of(2.0, 1.25)
    g.cells[i, j] = 1.0
    m = g.mirrored()
    im, jm = SPEC.cell_of(2.0, -1.25)
    assert m.cells[im, jm] == 1.0
    assert m.cells.sum() == 1.0


def test_project_marks_the_covering_cell():
    scene = WorldScene(points=np.array([[2.0, 1.0]]))
    grid = project_to_ego(scene, (0.0, 0.0, 0.0), SPEC)
    i, j = SPEC.cell_of(2.0, 1.0)
    assert grid.cells[i, j] == 1.0
    assert grid.cells.sum() == 1.0


def test_project_respects_ego_pose():
    scene = WorldScene(points=np.array([[2.6, 3.0]]))
    # ego at (1, 1) rotated 90 degrees: obstacle is 2 m ahead, 1.6 m right
    grid = project_to_ego(scene, (1.0, 1.0, math.pi / 2), SPEC)
    i, j = SPEC.cell_of(2.0, -1.6)
    assert grid.cells[i, j] == 1.0
    assert grid.cells.sum() == 1.0


def test_project_drops_points_outside_grid():
    scene = WorldScene(points=np.array([[50.0, 0.0], [-5.0, 0.0], [1.0, 30.0]]))
    grid = project_to_ego(scene, (0.0, 0.0, 0.0), SPEC)
    assert grid.cells.sum() == 0.0


def test_project_noise_is_rigid_per_obstacle():
    box = (2.0, -0.2, 2.4, 0.2)
    scene = WorldScene(boxes=[box])
    a = project_to_ego(scene, (0, 0, 0), SPEC, noise_bound=0.3,
                       rng=np.random.default_rng(5))
    b = project_to_ego(scene, (0, 0, 0), SPEC, noise_bound=0.3,
                       rng=np.random.default_rng(5))
    assert np.array_equal(a.cells, b.cells)
    # a rigid shift keeps the occupied-cell count of the box nearly constant
    clean = project_to_ego(scene, (0, 0, 0), SPEC)
    assert abs(a.cells.sum() - clean.cells.sum()) <= 2


def test_scene_agents_advance_with_frames():
    scene = WorldScene(agents=[(np.array([1.0, 0.0]), np.array([0.5, 0.0]))])
    pts0 = scene.all_points(frames_ahead=0)
    pts4 = scene.all_points(frames_ahead=4)
    assert pts0[0, 0] == pytest.approx(1.0)
    assert pts4[0, 0] == pytest.approx(3.0)


def grid_with_cell(i, j, value=1.0):
    g = EgoGrid.empty(SPEC)
    g.cells[i, j] = value
    return g


def test_flow_measure_static_obstacle():
    g = grid_with_cell(4, 6)
    flow = FlowField.initial(SPEC)
    z = flow_measure(g, g, flow)
    assert z.mask[4, 6]
    assert z.z_x[4, 6] == 0.0 and z.z_y[4, 6] == 0.0


def test_flow_measure_moving_obstacle():
    prev = grid_with_cell(4, 6)
    curr = grid_with_cell(4, 7)
    z = flow_measure(prev, curr, FlowField.initial(SPEC))
    assert z.z_x[4, 6] == 1.0
    assert z.z_y[4, 6] == 0.0


def test_flow_update_moves_toward_measurement():
    flow = FlowField.initial(SPEC, p0=1.0)
    prev = grid_with_cell(4, 6)
    curr = grid_with_cell(4, 7)
    z = flow_measure(prev, curr, flow)
    upd = flow_update(flow, z)
    # gain = (p + q) / (p + q + r) with p0 = 1, q = 0.01, r = 1
    gain = 1.01 / 2.01
    assert upd.v_x[4, 6] == pytest.approx(gain)
    assert upd.p_x[4, 6] == pytest.approx(1.01 * (1 - gain))
    # untouched cells keep their state
    assert upd.v_x[0, 0] == 0.0 and upd.p_x[0, 0] == 1.0


def test_flow_update_clips_and_floors():
    flow = FlowField.initial(SPEC, p0=1e6, v_max=2.0, p_floor=1e-3)
    prev = grid_with_cell(4, 3)
    curr = grid_with_cell(4, 6)
    z = flow_measure(prev, curr, flow)
    upd = flow_update(flow, z)
    assert upd.v_x[4, 3] <= 2.0
    assert upd.p_x.min() >= 1e-3


def test_flow_smooth_averages_velocities():
    f1 = FlowField.initial(SPEC)
    f2 = FlowField.initial(SPEC)
    f1.v_x[2, 2] = 1.0
    f2.v_x[2, 2] = 3.0
    sm = flow_smooth([f1, f2], window=2)
    assert sm.v_x[2, 2] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        flow_smooth([], window=2)


def test_predict_relocates_mass():
    g = grid_with_cell(4, 6, 0.8)
    flow = FlowField.initial(SPEC)
    flow.v_x[4, 6] = 1.0
    out = predict_occupancy(g, flow, steps_ahead=3)
    assert out.cells[4, 9] == pytest.approx(0.8)
    assert out.cells[4, 6] == 0.0


def test_predict_clamps_at_grid_edge():
    g = grid_with_cell(4, 10)
    flow = FlowField.initial(SPEC)
    flow.v_x[4, 10] = 2.0
    out = predict_occupancy(g, flow, steps_ahead=5)
    assert out.cells[4, SPEC.n_cols - 1] == 1.0


def test_grid_snapshot_roundtrip(tmp_path):
    g = EgoGrid.empty(SPEC)
    g.cells[1, 2] = 0.75
    path = tmp_path / "grid.txt"
    save_grid(g, path)
    loaded = load_grid(path)
    assert loaded.spec == SPEC
    assert np.allclose(loaded.cells, g.cells)

"""A* and RRT* baselines operating on the same ego-centric occupancy grid.

Both plan a point robot, so occupied cells are inflated by half the ego
width, and both receive a pre-validated collision-free goal (nearest free
point when the requested goal is blocked).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt

from .occupancy import OCCUPANCY_THRESHOLD, EgoGrid

SQRT2 = math.sqrt(2.0)


class GoalValidationError(RuntimeError):
    """No free point with the required clearance exists inside the grid."""


def clearance_map(grid: EgoGrid, threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
    """Per-cell distance (meters) to the nearest occupied cell center."""
    occ = grid.cells >= threshold
    if not occ.any():
        return np.full(grid.cells.shape, np.inf)
    return distance_transform_edt(~occ) * grid.spec.cell_size


def validate_goal(
    grid: EgoGrid, goal: tuple[float, float], clearance: float
) -> tuple[float, float]:
    """Return `goal` if it keeps the required clearance, else the nearest
    grid point (by displacement, then row-major order) that does."""
    spec = grid.spec
    dist = clearance_map(grid)
    gi, gj = spec.cell_of(*goal)
    inside = spec.contains(gi, gj)
    gi = min(max(gi, 0), spec.n_rows - 1)
    gj = min(max(gj, 0), spec.n_cols - 1)
    if inside and dist[gi, gj] >= clearance:
        return goal
    if not inside and dist[gi, gj] >= clearance:
        # off-grid request: fall back to the nearest in-grid cell center
        return (float((gj - spec.ego_col) * spec.cell_size),
                float((spec.ego_row - gi) * spec.cell_size))
    free = dist >= clearance
    if not free.any():
        raise GoalValidationError("no free point meets the clearance requirement")
    rows, cols = np.nonzero(free)
    xs = (cols - spec.ego_col) * spec.cell_size
    ys = (spec.ego_row - rows) * spec.cell_size
    d2 = (xs - goal[0]) ** 2 + (ys - goal[1]) ** 2
    best = int(np.argmin(d2))  # argmin is row-major stable on ties
    return float(xs[best]), float(ys[best])


def _blocked(grid: EgoGrid, inflation: float) -> np.ndarray:
    return clearance_map(grid) < inflation


def astar_plan(
    grid: EgoGrid,
    start: tuple[float, float],
    goal: tuple[float, float],
    inflation: float = 0.5,
) -> Optional[np.ndarray]:
    """8-connected A* with octile heuristic over the inflated grid.

    Returns a cell-center polyline from start to goal, or None on failure.
    The start cell is always considered traversable (the ego is there).
    Diagonal moves past a blocked orthogonal neighbor are forbidden, so the
    returned polyline never clips the corner of an inflated cell.
    """
    spec = grid.spec
    blocked = _blocked(grid, inflation)
    si, sj = spec.cell_of(*start)
    gi, gj = spec.cell_of(*goal)
    for i, j in ((si, sj), (gi, gj)):
        if not spec.contains(i, j):
            return None
    blocked[si, sj] = False
    if blocked[gi, gj]:
        return None

    def heuristic(i, j):
        di, dj = abs(i - gi), abs(j - gj)
        return (di + dj) + (SQRT2 - 2.0) * min(di, dj)

    g_cost = {(si, sj): 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    open_heap = [(heuristic(si, sj), si, sj)]
    closed = set()
    moves = [(-1, -1, SQRT2), (-1, 0, 1.0), (-1, 1, SQRT2),
             (0, -1, 1.0), (0, 1, 1.0),
             (1, -1, SQRT2), (1, 0, 1.0), (1, 1, SQRT2)]
    while open_heap:
        _, i, j = heapq.heappop(open_heap)
        if (i, j) in closed:
            continue
        closed.add((i, j))
        if (i, j) == (gi, gj):
            cells = [(i, j)]
            while cells[-1] in parent:
                cells.append(parent[cells[-1]])
            cells.reverse()
            return np.array(
                [[(c - spec.ego_col) * spec.cell_size,
                  (spec.ego_row - r) * spec.cell_size] for r, c in cells]
            )
        base = g_cost[(i, j)]
        for di, dj, w in moves:
            ni, nj = i + di, j + dj
            if not spec.contains(ni, nj) or blocked[ni, nj]:
                continue
            if di and dj and (blocked[ni, j] or blocked[i, nj]):
                continue
            cand = base + w
            if cand < g_cost.get((ni, nj), math.inf) - 1e-12:
                g_cost[(ni, nj)] = cand
                parent[(ni, nj)] = (i, j)
                heapq.heappush(open_heap, (cand + heuristic(ni, nj), ni, nj))
    return None


def dijkstra_cost(
    grid: EgoGrid,
    start: tuple[float, float],
    goal: tuple[float, float],
    inflation: float = 0.5,
) -> Optional[float]:
    """Brute-force optimal 8-connected cost; oracle for A* tests."""
    spec = grid.spec
    blocked = _blocked(grid, inflation)
    si, sj = spec.cell_of(*start)
    gi, gj = spec.cell_of(*goal)
    blocked[si, sj] = False
    dist = np.full(blocked.shape, np.inf)
    dist[si, sj] = 0.0
    heap = [(0.0, si, sj)]
    while heap:
        d, i, j = heapq.heappop(heap)
        if d > dist[i, j]:
            continue
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                ni, nj = i + di, j + dj
                if not spec.contains(ni, nj) or blocked[ni, nj]:
                    continue
                if di and dj and (blocked[ni, j] or blocked[i, nj]):
                    continue
                nd = d + (SQRT2 if di and dj else 1.0)
                if nd < dist[ni, nj]:
                    dist[ni, nj] = nd
                    heapq.heappush(heap, (nd, ni, nj))
    return None if math.isinf(dist[gi, gj]) else float(dist[gi, gj])


def _segment_free(p0, p1, blocked, spec) -> bool:
    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    n = max(int(length / (spec.cell_size * 0.5)) + 1, 2)
    ts = np.linspace(0.0, 1.0, n)
    xs = p0[0] + ts * (p1[0] - p0[0])
    ys = p0[1] + ts * (p1[1] - p0[1])
    rows = np.rint(spec.ego_row - ys / spec.cell_size).astype(int)
    cols = np.rint(xs / spec.cell_size + spec.ego_col).astype(int)
    if (rows.min() < 0 or rows.max() >= spec.n_rows
            or cols.min() < 0 or cols.max() >= spec.n_cols):
        return False
    return not blocked[rows, cols].any()


def rrtstar_plan(
    grid: EgoGrid,
    start: tuple[float, float],
    goal: tuple[float, float],
    n_iterations: int = 2000,
    step_size: float = 0.5,
    rewire_radius: float = 2.0,
    seed: int | np.random.Generator = 0,
    inflation: float = 0.5,
    goal_radius: float = 0.5,
    goal_bias: float = 0.05,
) -> Optional[np.ndarray]:
    """Standard RRT* in the grid footprint; returns the best path whose end
    lies within `goal_radius` of the goal, or None if none was found."""
    spec = grid.spec
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocked = _blocked(grid, inflation)
    si, sj = spec.cell_of(*start)
    if spec.contains(si, sj):
        blocked[si, sj] = False
    x_max = spec.n_cols * spec.cell_size
    y_half = spec.n_rows * spec.cell_size / 2.0

    cap = n_iterations + 1
    nodes = np.empty((cap, 2))
    parents = np.full(cap, -1, dtype=int)
    costs = np.empty(cap)
    nodes[0] = start
    costs[0] = 0.0
    n_nodes = 1
    goal_arr = np.asarray(goal, dtype=float)

    for _ in range(n_iterations):
        if rng.uniform() < goal_bias:
            sample = goal_arr.copy()
        else:
            sample = np.array([rng.uniform(0.0, x_max),
                               rng.uniform(-y_half, y_half)])
        d2 = np.sum((nodes[:n_nodes] - sample) ** 2, axis=1)
        nearest = int(np.argmin(d2))
        delta = sample - nodes[nearest]
        dist = math.hypot(*delta)
        if dist < 1e-9:
            continue
        new = nodes[nearest] + delta * min(step_size / dist, 1.0)
        if not _segment_free(nodes[nearest], new, blocked, spec):
            continue
        # choose the cheapest collision-free parent within the rewire radius
        d = np.linalg.norm(nodes[:n_nodes] - new, axis=1)
        near = np.nonzero(d <= rewire_radius)[0]
        parent = nearest
        best_cost = costs[nearest] + d[nearest]
        for idx in near:
            cand = costs[idx] + d[idx]
            if cand < best_cost and _segment_free(nodes[idx], new, blocked, spec):
                parent, best_cost = int(idx), cand
        nodes[n_nodes] = new
        parents[n_nodes] = parent
        costs[n_nodes] = best_cost
        # rewire neighbors through the new node when cheaper
        for idx in near:
            cand = best_cost + d[idx]
            if cand < costs[idx] - 1e-12 and _segment_free(new, nodes[idx], blocked, spec):
                parents[idx] = n_nodes
                delta_cost = costs[idx] - cand
                costs[idx] = cand
                # propagate the improvement to the rewired subtree
                frontier = [int(idx)]
                while frontier:
                    children = np.nonzero(parents[:n_nodes] == frontier.pop())[0]
                    costs[children] -= delta_cost
                    frontier.extend(int(c) for c in children)
        n_nodes += 1

    d_goal = np.linalg.norm(nodes[:n_nodes] - goal_arr, axis=1)
    reachable = np.nonzero(d_goal <= goal_radius)[0]
    if len(reachable) == 0:
        return None
    best = int(reachable[np.argmin(costs[reachable])])
    path = [best]
    while parents[path[-1]] >= 0:
        path.append(int(parents[path[-1]]))
    path.reverse()
    return nodes[path].copy()


def path_intersects_occupancy(
    path: np.ndarray, grid: EgoGrid, inflation: float
) -> bool:
    """Post-hoc geometric check that a polyline stays off inflated cells.

    The cell containing the first point is treated as traversable, matching
    the planners' start-cell convention (the ego already occupies it and may
    have to plan its way out of an inflated region).
    """
    blocked = _blocked(grid, inflation)
    spec = grid.spec
    si, sj = spec.cell_of(float(path[0][0]), float(path[0][1]))
    if spec.contains(si, sj):
        blocked[si, sj] = False
    for p0, p1 in zip(path[:-1], path[1:]):
        if not _segment_free(p0, p1, blocked, spec):
            return True
    return False

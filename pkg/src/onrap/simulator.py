"""Closed-loop episode execution, metrics, and Monte-Carlo orchestration.

Every cycle the ego rebuilds its noisy ego-centric grid, selects a noisy
local goal, plans, and moves to the first point of the plan.  Metrics are
evaluated on the actually traversed trajectory against the true (noise-free)
obstacle positions.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import baselines
from .kinematics import DomainError, PlanarState
from .occupancy import EgoGrid, FlowField, GridSpec, WorldScene, flow_measure, \
    flow_update, predict_occupancy, project_to_ego
from .planner import InfeasibleStartError, PlannerParams, default_planner_params, \
    plan, warm_start_shift
from .reference import PoseBoundary, inject_reference_noise, quintic_hermite, \
    resample_to_steps, select_local_goal

PLANNERS = ("onrap", "astar", "rrtstar")


@dataclass
class ScenarioConfig:
    route_amplitude: float = 1.5
    route_wavelength: float = 40.0
    route_length: float = 40.0
    route: Optional[np.ndarray] = None   # explicit waypoints override the sinusoid
    obstacle_density: float = 1.0 / 15.0  # obstacles per m^2 of corridor
    obstacle_size: float = 0.5           # square obstacle side length, m
    corridor_halfwidth: float = 4.0
    min_spawn_distance: float = 6.0      # keep the start area clear
    occupancy_noise: float = 0.3
    reference_noise: float = 0.3
    planner: str = "onrap"
    flow_enabled: bool = False
    seed: int = 0
    lookahead: float = 10.0
    grid_rows: int = 48
    grid_cols: int = 64
    cell_size: float = 0.25
    rrt_iterations: int = 600
    rrt_step: float = 0.5
    rrt_rewire_radius: float = 2.0
    cycle_limit_factor: float = 6.0
    slip_slew: float = 0.25   # max change of the executed slip between cycles, rad
    params: PlannerParams = field(default_factory=default_planner_params)
    agents: list = field(default_factory=list)  # (pos, vel) world-frame pairs

    def __post_init__(self):
        if self.occupancy_noise < 0 or self.reference_noise < 0:
            raise ValueError("noise bounds must be non-negative")
        if self.obstacle_density < 0:
            raise ValueError("obstacle density must be non-negative")
        if self.planner not in PLANNERS:
            raise ValueError(f"unknown planner {self.planner!r}")

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_rows, self.grid_cols, self.cell_size)


@dataclass
class EpisodeMetrics:
    planner: str
    seed: int
    runtime_mean: float
    runtime_max: float
    success: bool
    completed: bool
    min_clearance: float
    avg_clearance: float
    max_curvature: float
    path_length: float
    n_cycles: int
    failure_cause: str = ""
    goal_validation_time: float = 0.0  # mean per cycle, baselines only


@dataclass
class CycleRecord:
    cycle: int
    pose: tuple[float, float, float]
    goal: tuple[float, float]          # world frame
    solve_time: float
    clearance: float
    planned: Optional[np.ndarray]      # world-frame polyline


@dataclass
class EpisodeTrace:
    route: np.ndarray
    obstacles: np.ndarray
    cycles: list[CycleRecord] = field(default_factory=list)


def make_route(config: ScenarioConfig, spacing: float = 0.25) -> np.ndarray:
    if config.route is not None:
        return np.asarray(config.route, dtype=float)
    xs = np.arange(0.0, config.route_length + spacing / 2, spacing)
    ys = config.route_amplitude * np.sin(2.0 * math.pi * xs / config.route_wavelength)
    return np.column_stack([xs, ys])


def make_scene(config: ScenarioConfig, route: np.ndarray,
               rng: np.random.Generator) -> WorldScene:
    """Random point obstacles inside a corridor around the route."""
    length = float(route[-1, 0] - route[0, 0])
    usable = max(length - config.min_spawn_distance, 0.0)
    area = usable * 2.0 * config.corridor_halfwidth
    count = int(round(config.obstacle_density * area))
    xs = rng.uniform(config.min_spawn_distance, route[0, 0] + length, size=count)
    offsets = rng.uniform(-config.corridor_halfwidth, config.corridor_halfwidth,
                          size=count)
    ys = np.interp(xs, route[:, 0], route[:, 1]) + offsets
    half = config.obstacle_size / 2.0
    boxes = [(x - half, y - half, x + half, y + half) for x, y in zip(xs, ys)]
    agents = [(np.asarray(p, dtype=float), np.asarray(v, dtype=float))
              for p, v in config.agents]
    return WorldScene(boxes=boxes, agents=agents)


def _ego_to_world(pose, pts):
    ex, ey, eh = pose
    c, s = math.cos(eh), math.sin(eh)
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return np.column_stack([ex + c * pts[:, 0] - s * pts[:, 1],
                            ey + s * pts[:, 0] + c * pts[:, 1]])


def _point_along(path: np.ndarray, arc: float) -> tuple[float, float, float]:
    """Point and segment heading at arc length `arc` along a polyline
    (clamped to the endpoint)."""
    path = np.asarray(path, dtype=float)
    seg = np.diff(path, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = min(arc, float(cum[-1]))
    k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
    t = 0.0 if lengths[k] < 1e-12 else (s - cum[k]) / lengths[k]
    p = path[k] + t * seg[k]
    heading = math.atan2(seg[k][1], seg[k][0])
    return float(p[0]), float(p[1]), heading


def _stream(seed: int, cycle: int, purpose: int) -> np.random.Generator:
    # Noise streams are keyed by (episode seed, cycle, purpose) so that every
    # planner sees bitwise-identical scenes and noise regardless of when or
    # in which order episodes run.
    return np.random.default_rng([seed, cycle, purpose])


def success_of(clearances, ego_width: float) -> bool:
    """True iff every traversed pose kept clearance strictly above width/2."""
    clearances = np.asarray(clearances, dtype=float)
    if clearances.size == 0:
        raise ValueError("empty trace")
    return bool(np.all(clearances > ego_width / 2.0))


def discrete_curvature(points: np.ndarray) -> np.ndarray:
    """Menger curvature (inverse circumradius) for interior points."""
    points = np.asarray(points, dtype=float)
    if len(points) < 3:
        raise ValueError("need at least 3 points")
    out = []
    for a, b, c in zip(points[:-2], points[1:-1], points[2:]):
        ab = np.linalg.norm(b - a)
        bc = np.linalg.norm(c - b)
        ca = np.linalg.norm(a - c)
        if min(ab, bc, ca) < 1e-9:
            warnings.warn("duplicate consecutive points skipped in curvature")
            continue
        area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        out.append(2.0 * area2 / (ab * bc * ca))
    return np.array(out)


def run_episode(
    config: ScenarioConfig, collect_trace: bool = False
) -> tuple[EpisodeMetrics, Optional[EpisodeTrace]]:
    route = make_route(config)
    scene = make_scene(config, route, _stream(config.seed, 0, 99))
    spec = config.grid_spec()
    params = config.params
    n = params.n_steps
    ego_width = params.geometry.width
    inflation = ego_width / 2.0

    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    stop_arc = cum[-1] - config.lookahead
    # smallest credible per-cycle advance is one cell (A* neighbor step)
    cycle_cap = int(config.cycle_limit_factor * cum[-1] / config.cell_size)

    heading0 = math.atan2(route[1, 1] - route[0, 1], route[1, 0] - route[0, 0])
    ego = (float(route[0, 0]), float(route[0, 1]), heading0)
    prev_plan = None
    flow = FlowField.initial(spec) if config.flow_enabled else None

    solve_times: list[float] = []
    goal_val_times: list[float] = []
    clearances: list[float] = []
    traversed = [np.array(ego[:2])]
    trace = EpisodeTrace(route=route, obstacles=scene.all_points()) \
        if collect_trace else None
    completed = False
    cause = ""
    cycle = 0
    no_path_streak = 0
    u_exec = 0.0

    def clearance_at(pos, frame):
        pts = scene.all_points(frames_ahead=frame)
        if pts.shape[0] == 0:
            return math.inf
        return float(np.min(np.linalg.norm(pts - np.asarray(pos), axis=1)))

    clearances.append(clearance_at(ego[:2], 0))

    while True:
        progress = cum[int(np.argmin(np.sum((route - np.array(ego[:2])) ** 2, axis=1)))]
        if progress >= stop_arc:
            completed = True
            break
        if cycle >= cycle_cap:
            cause = "cycle limit"
            break

        grid = project_to_ego(scene, ego, spec, config.occupancy_noise,
                              _stream(config.seed, cycle, 0), frames_ahead=cycle)
        goal = select_local_goal(route, ego, config.lookahead)
        goal_world = tuple(_ego_to_world(ego, [(goal.x, goal.y)])[0])

        planned_world = None
        try:
            if config.planner == "onrap":
                grids = grid
                if flow is not None:
                    prev_grid = project_to_ego(
                        scene, ego, spec, config.occupancy_noise,
                        _stream(config.seed, cycle, 4), frames_ahead=cycle - 1)
                    z = flow_measure(prev_grid, grid, flow)
                    flow = flow_update(flow, z)
                    grids = [predict_occupancy(grid, flow, k) for k in range(n + 1)]
                # steep noisy goal headings can fold the spline back in x,
                # and a strongly deviated ego can put the goal behind it;
                # clamp both and keep the monotone envelope
                safe_goal = PoseBoundary(
                    max(goal.x, 0.5 * config.lookahead), goal.y,
                    min(max(goal.heading, -0.7), 0.7),
                    end_of_route=goal.end_of_route)
                curve = quintic_hermite(PoseBoundary(0.0, 0.0, 0.0), safe_goal)
                keep = [0]
                for idx in range(1, len(curve)):
                    if curve[idx, 0] > curve[keep[-1], 0] + 1e-9:
                        keep.append(idx)
                ref = resample_to_steps(curve[keep], params.ds, n)
                ref = inject_reference_noise(ref, config.reference_noise,
                                             _stream(config.seed, cycle, 2))
                t0 = time.perf_counter()
                result = plan(PlanarState(0.0, 0.0, 0.0), grids, ref, params,
                              warm_start_shift(prev_plan, n),
                              u_prev=u_exec, u_slew=config.slip_slew)
                solve_times.append(time.perf_counter() - t0)
                prev_plan = result
                local = np.column_stack([[s.x for s in result.states],
                                         [s.y for s in result.states]])
                planned_world = _ego_to_world(ego, local)
                u_exec = float(result.controls[0])
                nxt = result.states[1]
                new_xy = _ego_to_world(ego, [(nxt.x, nxt.y)])[0]
                ego = (float(new_xy[0]), float(new_xy[1]), ego[2] + nxt.heading)
            else:
                # baselines consume only the goal point, so the reference
                # noise lands there instead of on spline waypoints
                noisy_goal = np.array([goal.x, goal.y]) + _stream(
                    config.seed, cycle, 2
                ).uniform(-config.reference_noise, config.reference_noise, size=2)
                t0 = time.perf_counter()
                goal_xy = baselines.validate_goal(
                    grid, tuple(noisy_goal), inflation + config.cell_size)
                goal_val_times.append(time.perf_counter() - t0)
                t0 = time.perf_counter()
                if config.planner == "astar":
                    path = baselines.astar_plan(grid, (0.0, 0.0), goal_xy, inflation)
                else:
                    path = baselines.rrtstar_plan(
                        grid, (0.0, 0.0), goal_xy,
                        n_iterations=config.rrt_iterations,
                        step_size=config.rrt_step,
                        rewire_radius=config.rrt_rewire_radius,
                        seed=_stream(config.seed, cycle, 3),
                        inflation=inflation)
                solve_times.append(time.perf_counter() - t0)
                if path is None or len(path) < 2:
                    # hold position and retry; persistent failure gives up
                    no_path_streak += 1
                    if no_path_streak >= 5:
                        cause = "baseline found no path"
                        break
                    cycle += 1
                    continue
                no_path_streak = 0
                planned_world = _ego_to_world(ego, path)
                # advance the same arc distance per cycle as the NLP planner
                px, py, dpsi = _point_along(path, params.ds)
                new_xy = _ego_to_world(ego, [(px, py)])[0]
                ego = (float(new_xy[0]), float(new_xy[1]), ego[2] + dpsi)
        except (InfeasibleStartError, DomainError, ValueError) as err:
            cause = f"planner failure: {err}"
            break

        cycle += 1
        traversed.append(np.array(ego[:2]))
        clearances.append(clearance_at(ego[:2], cycle))
        if trace is not None:
            trace.cycles.append(CycleRecord(
                cycle=cycle, pose=ego, goal=goal_world,
                solve_time=solve_times[-1], clearance=clearances[-1],
                planned=planned_world))

    traversed_arr = np.vstack(traversed)
    seg_len = float(np.sum(np.linalg.norm(np.diff(traversed_arr, axis=0), axis=1)))
    if len(traversed_arr) >= 3:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            curvs = discrete_curvature(traversed_arr)
        max_curv = float(np.max(curvs)) if curvs.size else 0.0
    else:
        max_curv = 0.0
    clear = np.asarray(clearances)
    metrics = EpisodeMetrics(
        planner=config.planner,
        seed=config.seed,
        runtime_mean=float(np.mean(solve_times)) if solve_times else 0.0,
        runtime_max=float(np.max(solve_times)) if solve_times else 0.0,
        success=completed and success_of(clear, ego_width),
        completed=completed,
        min_clearance=float(np.min(clear)),
        avg_clearance=float(np.mean(clear)),
        max_curvature=max_curv,
        path_length=seg_len,
        n_cycles=cycle,
        failure_cause=cause,
        goal_validation_time=float(np.mean(goal_val_times)) if goal_val_times else 0.0,
    )
    return metrics, trace


def _episode_task(config: ScenarioConfig) -> EpisodeMetrics:
    return run_episode(config)[0]


def aggregate(episodes: list[EpisodeMetrics]) -> dict:
    def mean(vals):
        vals = [v for v in vals if math.isfinite(v)]
        return float(np.mean(vals)) if vals else math.inf
    return {
        "episodes": len(episodes),
        "runtime_mean_s": mean([m.runtime_mean for m in episodes]),
        "runtime_max_s": mean([m.runtime_max for m in episodes]),
        "success_rate": float(np.mean([m.success for m in episodes])),
        "min_dist_m": mean([m.min_clearance for m in episodes]),
        "avg_dist_m": mean([m.avg_clearance for m in episodes]),
        "max_curv_inv_m": mean([m.max_curvature for m in episodes]),
        "path_len_m": mean([m.path_length for m in episodes]),
    }


def run_monte_carlo(
    base_config: ScenarioConfig,
    n_episodes: int,
    planners: tuple[str, ...] = PLANNERS,
    n_workers: int = 1,
) -> dict:
    """Shared-seed comparison: every planner sees the same scenes and noise."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    tasks = [
        replace(base_config, planner=p, seed=base_config.seed + i)
        for p in planners
        for i in range(n_episodes)
    ]
    if n_workers > 1:
        with multiprocessing.Pool(n_workers) as pool:
            results = pool.map(_episode_task, tasks)
    else:
        results = [_episode_task(t) for t in tasks]
    out = {}
    for p in planners:
        eps = [m for m in results if m.planner == p]
        eps.sort(key=lambda m: m.seed)
        out[p] = {"episodes": eps, "aggregate": aggregate(eps)}
    return out


def save_trace(trace: EpisodeTrace, path) -> None:
    """CSV trace: route and obstacle rows, then one row per cycle."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "cycle", "x", "y", "heading", "goal_x",
                         "goal_y", "solve_time", "clearance", "plan"])
        for x, y in trace.route:
            writer.writerow(["route", "", f"{x:.6f}", f"{y:.6f}",
                             "", "", "", "", "", ""])
        for x, y in trace.obstacles:
            writer.writerow(["obstacle", "", f"{x:.6f}", f"{y:.6f}",
                             "", "", "", "", "", ""])
        for rec in trace.cycles:
            planned = "" if rec.planned is None else ";".join(
                f"{px:.4f}:{py:.4f}" for px, py in rec.planned)
            writer.writerow([
                "cycle", rec.cycle,
                f"{rec.pose[0]:.6f}", f"{rec.pose[1]:.6f}", f"{rec.pose[2]:.6f}",
                f"{rec.goal[0]:.6f}", f"{rec.goal[1]:.6f}",
                f"{rec.solve_time:.6f}", f"{rec.clearance:.6f}", planned,
            ])


def load_trace(path) -> EpisodeTrace:
    route, obstacles, cycles = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "kind":
            raise ValueError(f"{path}: line 1: missing trace header")
        for lineno, row in enumerate(reader, start=2):
            try:
                kind = row[0]
                if kind == "route":
                    route.append((float(row[2]), float(row[3])))
                elif kind == "obstacle":
                    obstacles.append((float(row[2]), float(row[3])))
                elif kind == "cycle":
                    planned = None
                    if row[9]:
                        planned = np.array([
                            [float(a) for a in pair.split(":")]
                            for pair in row[9].split(";")
                        ])
                    cycles.append(CycleRecord(
                        cycle=int(row[1]),
                        pose=(float(row[2]), float(row[3]), float(row[4])),
                        goal=(float(row[5]), float(row[6])),
                        solve_time=float(row[7]),
                        clearance=float(row[8]),
                        planned=planned,
                    ))
                else:
                    raise ValueError(f"unknown row kind {kind!r}")
            except (IndexError, ValueError) as err:
                raise ValueError(f"{path}: line {lineno}: {err}") from None
    if not cycles:
        raise ValueError(f"{path}: trace contains no cycle rows")
    return EpisodeTrace(
        route=np.asarray(route).reshape(-1, 2),
        obstacles=np.asarray(obstacles).reshape(-1, 2),
        cycles=cycles,
    )

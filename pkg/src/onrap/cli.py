"""Batch entry point: single episodes, Monte-Carlo sweeps, replays, checks.

Config files are flat ``key = value`` text with section headers (configparser
syntax).  Unknown keys are rejected with a diagnostic naming the key.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost as cost_mod
from .kinematics import VehicleGeometry
from .cost import ObjectiveWeights, RiskParams
from .planner import PlannerParams
from .reference import load_route
from .simulator import PLANNERS, ScenarioConfig, load_trace, run_episode, \
    run_monte_carlo, save_trace

METRICS_COLUMNS = [
    "episode", "planner", "seed", "runtime_mean_s", "runtime_max_s",
    "success", "min_dist_m", "avg_dist_m", "max_curv_inv_m", "path_len_m",
]


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "planner": {
        "planning_horizon": float, "ds": float, "q_d": float, "q_u": float,
        "lambda_curve": float, "lambda_grid": float, "alpha_decay": float,
        "sigma": float, "tau": float, "u_min": float, "u_max": float,
        "l_f": float, "l_r": float, "length": float, "width": float,
        "psi_min": float, "psi_max": float, "epsilon": float,
        "y_lb": float, "y_ub": float,
    },
    "scenario": {
        "route_amplitude": float, "route_wavelength": float,
        "route_length": float, "route_file": str, "obstacle_density": float,
        "obstacle_size": float, "corridor_halfwidth": float,
        "min_spawn_distance": float, "occupancy_noise": float,
        "reference_noise": float, "lookahead": float,
        "cycle_limit_factor": float, "slip_slew": float,
    },
    "grid": {"n_rows": int, "n_cols": int, "cell_size": float},
    "baselines": {
        "rrt_iterations": int, "rrt_step": float, "rrt_rewire_radius": float,
    },
    "run": {
        "episodes": int, "seed": int, "planners": str, "flow": str,
        "plots": str, "timing": str,
    },
}


def read_config(path) -> dict:
    """Parse and validate a config file into {section: {key: typed value}}."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    out: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        out[section] = {}
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                out[section][key] = _SCHEMA[section][key](raw)
            except ValueError:
                raise ConfigError(
                    f"bad value {raw!r} for key {key!r} in [{section}]"
                ) from None
    return out


def build_scenario(cfg: dict) -> ScenarioConfig:
    p = cfg.get("planner", {})
    weights = ObjectiveWeights(
        q_d=p.get("q_d", 1.0),
        q_u=p.get("q_u", 1.0),
        lambda_curve=p.get("lambda_curve", 10.0),
    )
    risk = RiskParams(
        sigma=p.get("sigma", 1.5),
        tau=p.get("tau", 2.0 / 3.0),
        lambda_grid=p.get("lambda_grid", 100.0),
        alpha_decay=p.get("alpha_decay", 0.95),
    )
    geometry = VehicleGeometry(
        l_f=p.get("l_f", 1.0), l_r=p.get("l_r", 1.0),
        length=p.get("length", 2.0), width=p.get("width", 1.0),
    )
    try:
        params = PlannerParams(
            horizon=p.get("planning_horizon", 10.0),
            ds=p.get("ds", 0.5),
            u_min=p.get("u_min", -1.0),
            u_max=p.get("u_max", 1.0),
            psi_min=p.get("psi_min", -0.5),
            psi_max=p.get("psi_max", 0.5),
            eps_buffer=p.get("epsilon", 0.05),
            y_lb=p.get("y_lb", -3.75),
            y_ub=p.get("y_ub", 3.75),
            weights=weights, risk=risk, geometry=geometry,
        )
    except ValueError as err:
        raise ConfigError(f"invalid planner parameters: {err}") from None
    s = cfg.get("scenario", {})
    g = cfg.get("grid", {})
    b = cfg.get("baselines", {})
    route = None
    if "route_file" in s:
        route = load_route(s["route_file"])
    try:
        return ScenarioConfig(
            route_amplitude=s.get("route_amplitude", 1.5),
            route_wavelength=s.get("route_wavelength", 40.0),
            route_length=s.get("route_length", 40.0),
            route=route,
            obstacle_density=s.get("obstacle_density", 1.0 / 15.0),
            obstacle_size=s.get("obstacle_size", 0.5),
            corridor_halfwidth=s.get("corridor_halfwidth", 4.0),
            min_spawn_distance=s.get("min_spawn_distance", 6.0),
            occupancy_noise=s.get("occupancy_noise", 0.3),
            reference_noise=s.get("reference_noise", 0.3),
            lookahead=s.get("lookahead", 10.0),
            cycle_limit_factor=s.get("cycle_limit_factor", 6.0),
            slip_slew=s.get("slip_slew", 0.25),
            grid_rows=g.get("n_rows", 48),
            grid_cols=g.get("n_cols", 64),
            cell_size=g.get("cell_size", 0.25),
            rrt_iterations=b.get("rrt_iterations", 600),
            rrt_step=b.get("rrt_step", 0.5),
            rrt_rewire_radius=b.get("rrt_rewire_radius", 2.0),
            params=params,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.6f}"
    return str(value)


def write_metrics_csv(results: dict, path, timing: bool = True) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for planner, data in results.items():
        for i, m in enumerate(data["episodes"]):
            row = [
                i, planner, m.seed,
                _fmt(m.runtime_mean if timing else 0.0),
                _fmt(m.runtime_max if timing else 0.0),
                _fmt(m.success), _fmt(m.min_clearance), _fmt(m.avg_clearance),
                _fmt(m.max_curvature), _fmt(m.path_length),
            ]
            lines.append(",".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(results: dict, path, timing: bool = True) -> None:
    headers = ["metric"] + list(results.keys())
    rows = [
        ("Run-time (s)", "runtime_mean_s"),
        ("Success Rate (%)", "success_rate"),
        ("Min Dist (m)", "min_dist_m"),
        ("Avg Dist (m)", "avg_dist_m"),
        ("Max Curv (1/m)", "max_curv_inv_m"),
        ("Path Len (m)", "path_len_m"),
    ]
    lines = ["  ".join(f"{h:>18}" for h in headers)]
    for label, key in rows:
        vals = []
        for data in results.values():
            v = data["aggregate"][key]
            if key == "success_rate":
                v *= 100.0
            if key.startswith("runtime") and not timing:
                v = 0.0
            vals.append(f"{v:18.3f}")
        lines.append(f"{label:>18}  " + "  ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def make_plots(trace, out_dir: Path, prefix: str = "") -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    poses = np.array([rec.pose[:2] for rec in trace.cycles])
    goals = np.array([rec.goal for rec in trace.cycles])

    fig, ax = plt.subplots(figsize=(10, 5))
    ax.plot(trace.route[:, 0], trace.route[:, 1], "y-", lw=2, label="route")
    if trace.obstacles.size:
        ax.plot(trace.obstacles[:, 0], trace.obstacles[:, 1], "rs",
                ms=5, label="occupied")
    for rec in trace.cycles[:: max(len(trace.cycles) // 12, 1)]:
        if rec.planned is not None:
            ax.plot(rec.planned[:, 0], rec.planned[:, 1], "b-", alpha=0.3, lw=0.8)
    ax.plot(poses[:, 0], poses[:, 1], "c-", lw=2, label="traversed")
    ax.plot(goals[:, 0], goals[:, 1], "g.", ms=3, label="goals")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    f = out_dir / f"{prefix}overlay.png"
    fig.savefig(f, dpi=120, bbox_inches="tight")
    plt.close(fig)
    files.append(f)

    for name, vals, xlabel in (
        ("clearance_hist", [r.clearance for r in trace.cycles], "min distance (m)"),
        ("solve_time_hist", [r.solve_time for r in trace.cycles], "solve time (s)"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        finite = [v for v in vals if math.isfinite(v)]
        ax.hist(finite, bins=30, color="steelblue", edgecolor="black")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        f = out_dir / f"{prefix}{name}.png"
        fig.savefig(f, dpi=120, bbox_inches="tight")
        plt.close(fig)
        files.append(f)
    return files


def cmd_run(args) -> int:
    try:
        cfg = read_config(args.config) if args.config else {}
        scenario = build_scenario(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    run_cfg = cfg.get("run", {})
    episodes = args.episodes or run_cfg.get("episodes", 1)
    seed = args.seed if args.seed is not None else run_cfg.get("seed", 0)
    planners = (args.planners or run_cfg.get("planners", "onrap")).split(",")
    for p in planners:
        if p not in PLANNERS:
            print(f"config error: unknown planner {p!r}", file=sys.stderr)
            return 2
    flow = (args.flow or run_cfg.get("flow", "off")) == "on"
    plots = (args.plots or run_cfg.get("plots", "off")) == "on"
    timing = run_cfg.get("timing", "wall") != "none"
    scenario = replace(scenario, seed=seed, flow_enabled=flow)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_workers = int(os.environ.get("ONRAP_THREADS", "1"))
    results = run_monte_carlo(scenario, episodes, tuple(planners),
                              n_workers=max(n_workers, 1))
    write_metrics_csv(results, out_dir / "metrics.csv", timing=timing)
    write_summary(results, out_dir / "summary.txt", timing=timing)
    if plots:
        for p in planners:
            _, trace = run_episode(replace(scenario, planner=p), collect_trace=True)
            save_trace(trace, out_dir / f"trace_{p}.csv")
            make_plots(trace, out_dir, prefix=f"{p}_")
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_replay(args) -> int:
    try:
        trace = load_trace(args.trace)
    except (OSError, ValueError) as err:
        print(f"replay error: {err}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = make_plots(trace, out_dir)
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_validate_params(args) -> int:
    try:
        cfg = read_config(args.config) if args.config else {}
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    p = cfg.get("planner", {})
    sigma = p.get("sigma", 1.5)
    tau = p.get("tau", 2.0 / 3.0)
    lam = p.get("lambda_grid", 100.0)
    u_min, u_max = p.get("u_min", -1.0), p.get("u_max", 1.0)
    psi_min, psi_max = p.get("psi_min", -0.5), p.get("psi_max", 0.5)
    eps = p.get("epsilon", 0.05)
    y_lb, y_ub = p.get("y_lb", -3.75), p.get("y_ub", 3.75)

    warnings_emitted = 0
    bound = cost_mod.lambda_grid_lower_bound(sigma, tau)
    print(f"risk weight lower bound: {bound:.4f} (configured {lam:.4f})")
    if lam >= bound:
        print("  risk-dominance bound: PASS")
    else:
        print("  WARNING: lambda_grid below the risk-dominance bound")
        warnings_emitted += 1
    print(f"implied max desired deviation: {math.sqrt(lam):.3f} m")

    corridor = y_ub - y_lb
    print(f"lateral corridor width: {corridor:.3f} m (5*sigma = {5 * sigma:.3f})")
    if corridor <= 5.0 * sigma + 1e-9:
        print("  corridor within 5 sigma: PASS")
    else:
        print("  WARNING: corridor wider than 5 sigma; solver may hit flat "
              "gradients and local minima")
        warnings_emitted += 1

    half = math.pi / 2.0
    ok_hi = psi_max < half - u_max - eps
    ok_lo = psi_min > -half - u_min + eps
    print(f"heading box: [{psi_min:.3f}, {psi_max:.3f}] rad, "
          f"limits ({-half - u_min + eps:.3f}, {half - u_max - eps:.3f})")
    if ok_hi and ok_lo:
        print("  heading box keeps the model well-defined: PASS")
    else:
        print("  WARNING: heading box violates the well-definedness bounds")
        warnings_emitted += 1
    print(f"{warnings_emitted} warning(s)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="onrap",
        description="Occupancy-driven local path planner benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run episodes and write metrics")
    run_p.add_argument("--config", default=None)
    run_p.add_argument("--episodes", type=int, default=None)
    run_p.add_argument("--planners", default=None,
                       help="comma-separated subset of onrap,astar,rrtstar")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--flow", choices=["on", "off"], default=None)
    run_p.add_argument("--out", default="out")
    run_p.add_argument("--plots", choices=["on", "off"], default=None)
    run_p.set_defaults(func=cmd_run)

    replay_p = sub.add_parser("replay", help="plot a recorded episode trace")
    replay_p.add_argument("trace")
    replay_p.add_argument("--out", default="out")
    replay_p.set_defaults(func=cmd_replay)

    val_p = sub.add_parser("validate-params", help="check parameter consistency")
    val_p.add_argument("--config", default=None)
    val_p.set_defaults(func=cmd_validate_params)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

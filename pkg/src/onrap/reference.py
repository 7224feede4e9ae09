"""Reference path generation from a single noisy local goal.

A quintic Hermite segment connects the ego (frame origin) to the selected
goal, is resampled at the planner's fixed longitudinal steps, and may be
perturbed with bounded uniform lateral noise for robustness testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class PoseBoundary:
    """Endpoint condition for the spline: position, heading and derivative
    magnitudes.  tangent_scale=None means "use the longitudinal separation"."""

    x: float
    y: float
    heading: float
    tangent_scale: Optional[float] = None
    curvature: float = 0.0
    end_of_route: bool = False

    def __post_init__(self):
        if not math.isfinite(self.heading):
            raise ValueError("heading must be finite")
        if self.tangent_scale is not None and self.tangent_scale <= 0:
            raise ValueError("tangent scale must be positive")


@dataclass
class ReferencePath:
    y_ref: np.ndarray          # lateral offset at x = 0, ds, ..., N*ds
    ds: float
    goal: Optional[PoseBoundary] = None
    extrapolated: bool = False  # horizon extended past the curve end

    def __post_init__(self):
        self.y_ref = np.asarray(self.y_ref, dtype=float)

    @property
    def n_steps(self) -> int:
        return len(self.y_ref) - 1


def quintic_hermite(
    start: PoseBoundary, goal: PoseBoundary, n_samples: int = 200
) -> np.ndarray:
    """Sample a quintic Hermite segment between two pose boundaries.

    Interpolates position, tangent direction (from the headings) and second
    derivative (normal-direction curvature hint, zero by default) at both
    ends; uniform sampling in the spline parameter.
    """
    dx = goal.x - start.x
    dy = goal.y - start.y
    if math.hypot(dx, dy) < 1e-9:
        raise ValueError("degenerate segment: start and goal coincide")
    if dx <= 0:
        raise ValueError("goal must lie ahead of start in the ego frame")

    def endpoint(p: PoseBoundary) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        scale = p.tangent_scale if p.tangent_scale is not None else dx
        tang = scale * np.array([math.cos(p.heading), math.sin(p.heading)])
        norm = p.curvature * scale**2 * np.array(
            [-math.sin(p.heading), math.cos(p.heading)]
        )
        return np.array([p.x, p.y]), tang, norm

    p0, d0, dd0 = endpoint(start)
    p1, d1, dd1 = endpoint(goal)
    # Conditions on value / first / second derivative at t = 0 and t = 1.
    rows = []
    for t, order in ((0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)):
        row = np.zeros(6)
        for k in range(6):
            if k >= order:
                coef = math.factorial(k) / math.factorial(k - order)
                row[k] = coef * t ** (k - order)
        rows.append(row)
    A = np.array(rows)
    rhs = np.column_stack([p0, d0, dd0, p1, d1, dd1]).T
    coeffs = np.linalg.solve(A, rhs)  # (6, 2)
    t = np.linspace(0.0, 1.0, n_samples)
    powers = np.column_stack([t**k for k in range(6)])
    return powers @ coeffs


def resample_to_steps(curve: np.ndarray, ds: float, n_steps: int) -> ReferencePath:
    """Linear interpolation of lateral offset at x = 0, ds, ..., n_steps*ds.

    Points past the curve end are extrapolated with the last segment's slope
    and the result is flagged.
    """
    curve = np.asarray(curve, dtype=float)
    xs, ys = curve[:, 0], curve[:, 1]
    if np.any(np.diff(xs) <= 0):
        raise ValueError("curve must be strictly monotone in x")
    targets = np.arange(n_steps + 1) * ds
    y_ref = np.interp(targets, xs, ys)
    extrapolated = bool(targets[-1] > xs[-1] + 1e-12)
    if extrapolated:
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        beyond = targets > xs[-1]
        y_ref[beyond] = ys[-1] + slope * (targets[beyond] - xs[-1])
    return ReferencePath(y_ref=y_ref, ds=ds, extrapolated=extrapolated)


def select_local_goal(
    route: np.ndarray,
    ego_pose: tuple[float, float, float],
    lookahead: float,
) -> PoseBoundary:
    """Pick the route point `lookahead` meters of arc ahead of the ego.

    The goal heading comes from the local chord direction; the result is
    expressed in the ego frame.  Running off the route end returns the
    terminal point with the end-of-route flag set.
    """
    route = np.asarray(route, dtype=float).reshape(-1, 2)
    if route.shape[0] == 0:
        raise ValueError("route is empty")
    ex, ey, eh = ego_pose
    d2 = np.sum((route - np.array([ex, ey])) ** 2, axis=1)
    i0 = int(np.argmin(d2))
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    target = cum[i0] + lookahead
    at_end = target >= cum[-1] - 1e-12
    ig = len(route) - 1 if at_end else int(np.searchsorted(cum, target))
    lo = max(ig - 1, 0)
    hi = min(ig + 1, len(route) - 1)
    chord = route[hi] - route[lo]
    heading_w = math.atan2(chord[1], chord[0])
    rel = route[ig] - np.array([ex, ey])
    c, s = math.cos(-eh), math.sin(-eh)
    rel_heading = heading_w - eh
    rel_heading = math.atan2(math.sin(rel_heading), math.cos(rel_heading))
    return PoseBoundary(
        x=c * rel[0] - s * rel[1],
        y=s * rel[0] + c * rel[1],
        heading=rel_heading,
        end_of_route=bool(at_end),
    )


def inject_reference_noise(
    path: ReferencePath, bound: float, seed_or_rng
) -> ReferencePath:
    """Independent uniform lateral perturbation in [-bound, bound] per waypoint."""
    if bound < 0:
        raise ValueError("noise bound must be non-negative")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    if bound == 0.0:
        return ReferencePath(path.y_ref.copy(), path.ds, path.goal, path.extrapolated)
    noisy = path.y_ref + rng.uniform(-bound, bound, size=path.y_ref.shape)
    return ReferencePath(noisy, path.ds, path.goal, path.extrapolated)


def load_route(path) -> np.ndarray:
    """Route file: one world-frame `x y` pair per line."""
    route = np.loadtxt(path, ndmin=2)
    if route.shape[1] != 2:
        raise ValueError("route file must have two columns (x y)")
    return route


def save_route(route: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(route, dtype=float), fmt="%.6f")

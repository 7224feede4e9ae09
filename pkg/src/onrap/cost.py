"""Objective assembly: tracking, Gaussian occupancy risk, effort, curvature.

The analytic gradient with respect to the control sequence is obtained by
reverse accumulation through the spatial bicycle recursion, so a single
evaluation yields both the cost and its exact gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .occupancy import OCCUPANCY_THRESHOLD, EgoGrid


@dataclass(frozen=True)
class RiskParams:
    sigma: float            # desired safety distance, m
    tau: float              # sharpness scale applied to sigma
    lambda_grid: float      # risk weight
    alpha_decay: float = 1.0  # per-step discount on the risk term

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")
        if not 0.0 < self.alpha_decay <= 1.0:
            raise ValueError("alpha_decay must be in (0, 1]")
        if self.lambda_grid < 0:
            raise ValueError("lambda_grid must be non-negative")

    @property
    def y_des_max(self) -> float:
        """Maximum desired deviation implied by the risk weight."""
        return math.sqrt(self.lambda_grid)

    def satisfies_lower_bound(self) -> bool:
        return self.lambda_grid >= lambda_grid_lower_bound(self.sigma, self.tau)


@dataclass(frozen=True)
class ObjectiveWeights:
    q_d: float = 1.0        # deviation weight (diagonal scalar)
    q_u: float = 1.0        # control-effort weight
    lambda_curve: float = 10.0

    def __post_init__(self):
        if min(self.q_d, self.q_u, self.lambda_curve) < 0:
            raise ValueError("weights must be non-negative")


def risk_kernel(y, y_cell, sigma: float, tau: float):
    """Gaussian risk of lateral position y against a cell at y_cell."""
    if sigma <= 0 or tau <= 0:
        raise ValueError("sigma and tau must be positive")
    d = np.asarray(y, dtype=float) - np.asarray(y_cell, dtype=float)
    return np.exp(-(d * d) / (2.0 * (sigma * tau) ** 2))


def lambda_grid_lower_bound(sigma: float, tau: float) -> float:
    """Smallest risk weight for which risk dominates the deviation penalty
    for an obstacle anywhere within the safety distance."""
    if sigma <= 0 or tau <= 0:
        raise ValueError("sigma and tau must be positive")
    return sigma**2 * math.exp(1.0 / (2.0 * tau**2))


def max_lateral_deviation(s: float, delta_max: float, wheelbase: float) -> float:
    """Lateral offset after arc s of a max-steer circular arc."""
    if s < 0:
        raise ValueError("s must be non-negative")
    if not 0 < delta_max < math.pi / 2:
        raise ValueError("delta_max must lie in (0, pi/2)")
    radius = wheelbase / math.tan(delta_max)
    return radius * (1.0 - math.cos(s / radius))


def step_columns(grid: EgoGrid, ds: float, n_steps: int) -> np.ndarray:
    """Grid column whose longitudinal center is nearest to each step's x.

    Raises if the grid does not cover the horizon.
    """
    centers = grid.spec.col_longitudinal_coords()
    xs = np.arange(n_steps + 1) * ds
    if xs[-1] > centers[-1] + grid.spec.cell_size / 2.0 + 1e-9:
        raise ValueError(
            f"grid covers {centers[-1] + grid.spec.cell_size / 2:.2f} m but the "
            f"horizon needs {xs[-1]:.2f} m"
        )
    return np.argmin(np.abs(centers[None, :] - xs[:, None]), axis=1)


def _pool_columns(binarized: np.ndarray, centers: np.ndarray,
                  ds: float, n_steps: int) -> np.ndarray:
    """Max-pool grid columns onto their nearest planner step.

    Pooling (rather than sampling one column per step) keeps obstacles
    visible when the grid resolution is finer than the step length.
    """
    assign = np.rint(centers / ds).astype(int)
    valid = (
        (assign >= 0)
        & (assign <= n_steps)
        & (np.abs(centers - assign * ds) <= ds / 2.0 + 1e-9)
    )
    occ = np.zeros((n_steps + 1, binarized.shape[0]))
    np.maximum.at(occ, assign[valid], binarized[:, valid].T)
    return occ.T


def occupancy_matrix(
    grids: Union[EgoGrid, Sequence[EgoGrid]],
    ds: float,
    n_steps: int,
    threshold: float = OCCUPANCY_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Binarized occupancy column per planner step.

    Accepts one grid for the whole horizon or one grid per step (predicted
    grids).  Returns (occ, y_rows) with occ of shape (n_rows, n_steps+1).
    """
    if isinstance(grids, EgoGrid):
        step_columns(grids, ds, n_steps)  # horizon coverage check
        centers = grids.spec.col_longitudinal_coords()
        occ = _pool_columns(grids.binarized(threshold), centers, ds, n_steps)
        return occ, grids.row_lateral_coords
    grids = list(grids)
    if len(grids) != n_steps + 1:
        raise ValueError("need one grid per step (n_steps + 1 grids)")
    step_columns(grids[0], ds, n_steps)
    centers = grids[0].spec.col_longitudinal_coords()
    occ = np.column_stack(
        [_pool_columns(g.binarized(threshold), centers, ds, n_steps)[:, k]
         for k, g in enumerate(grids)]
    )
    return occ, grids[0].row_lateral_coords


def grid_risk(
    y_plan: np.ndarray,
    grids: Union[EgoGrid, Sequence[EgoGrid]],
    params: RiskParams,
    ds: float,
) -> float:
    """Discount-weighted total occupancy risk along the planned laterals."""
    y_plan = np.asarray(y_plan, dtype=float)
    occ, y_rows = occupancy_matrix(grids, ds, len(y_plan) - 1)
    risk, _ = _risk_and_gradient(y_plan, occ, y_rows, params)
    return risk


def _risk_and_gradient(y_plan, occ, y_rows, params: RiskParams):
    """Risk value and its derivative with respect to each y_k."""
    st2 = (params.sigma * params.tau) ** 2
    w = params.alpha_decay ** np.arange(len(y_plan))
    diff = y_plan[None, :] - y_rows[:, None]          # (n_rows, N+1)
    contrib = occ * np.exp(-(diff * diff) / (2.0 * st2))
    risk = float(np.dot(w, contrib.sum(axis=0)))
    drisk_dy = w * np.sum(contrib * (-diff / st2), axis=0)
    return risk, drisk_dy


def backprop_through_rollout(
    u: np.ndarray,
    psi: np.ndarray,
    dJ_dy: np.ndarray,
    dJ_dpsi: np.ndarray,
    dJ_du: np.ndarray,
    ds: float,
    l_r: float,
    trig_override: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Adjoint pass through y_{k+1} = y_k + tan(psi_k + u_k) ds and
    psi_{k+1} = psi_k + ds/l_r sin(u_k)/cos(psi_k + u_k).

    trig_override = (dtan, invcos, dinvcos) arrays per step let a smoothly
    extended evaluation (outside the tan domain) supply its own local values
    and derivatives of tan(theta) and 1/cos(theta).
    """
    n = len(u)
    grad = np.array(dJ_du, dtype=float, copy=True)
    ybar = dJ_dy[n]
    pbar = dJ_dpsi[n]
    for k in range(n - 1, -1, -1):
        theta = psi[k] + u[k]
        if trig_override is None:
            dtan = 1.0 / math.cos(theta) ** 2
            invcos = 1.0 / math.cos(theta)
            dinv = math.sin(theta) / math.cos(theta) ** 2
        else:
            dtan = trig_override[0][k]
            invcos = trig_override[1][k]
            dinv = trig_override[2][k]
        dy_dtheta = ds * dtan
        su, cu = math.sin(u[k]), math.cos(u[k])
        dpsi_dtheta = ds / l_r * su * dinv
        dpsi_dpsi = 1.0 + dpsi_dtheta
        dpsi_du = ds / l_r * cu * invcos + dpsi_dtheta
        grad[k] += ybar * dy_dtheta + pbar * dpsi_du
        new_pbar = pbar * dpsi_dpsi + ybar * dy_dtheta + dJ_dpsi[k]
        ybar = ybar + dJ_dy[k]
        pbar = new_pbar
    return grad


def assemble_objective(
    u: np.ndarray,
    y_plan: np.ndarray,
    psi_plan: np.ndarray,
    y_ref: np.ndarray,
    grids: Union[EgoGrid, Sequence[EgoGrid]],
    weights: ObjectiveWeights,
    risk_params: RiskParams,
    ds: float,
    l_r: float,
) -> tuple[float, np.ndarray]:
    """Total cost and analytic gradient with respect to the controls.

    y_plan / psi_plan must be the rollout of u from the (fixed) initial state;
    the gradient treats y_0, psi_0 as constants.
    """
    cost, grad, _ = objective_terms(
        u, y_plan, psi_plan, y_ref, grids, weights, risk_params, ds, l_r
    )
    return cost, grad


def objective_terms(
    u, y_plan, psi_plan, y_ref, grids, weights, risk_params, ds, l_r
) -> tuple[float, np.ndarray, dict]:
    """As `assemble_objective` but also returns the per-term breakdown."""
    u = np.asarray(u, dtype=float)
    y_plan = np.asarray(y_plan, dtype=float)
    psi_plan = np.asarray(psi_plan, dtype=float)
    y_ref = np.asarray(y_ref, dtype=float)
    n = len(u)
    if len(y_plan) != n + 1 or len(psi_plan) != n + 1 or len(y_ref) != n + 1:
        raise ValueError("dimension mismatch between controls, states, reference")

    occ, y_rows = occupancy_matrix(grids, ds, n)
    risk, drisk_dy = _risk_and_gradient(y_plan, occ, y_rows, risk_params)

    dev = y_plan - y_ref
    cost_dev = weights.q_d * float(dev @ dev)
    cost_effort = weights.q_u * float(u @ u)
    tan_u = np.tan(u)
    cost_curve = weights.lambda_curve * float(tan_u @ tan_u)
    cost = cost_dev + risk_params.lambda_grid * risk + cost_effort + cost_curve
    if not math.isfinite(cost):
        bad = int(np.argmax(~np.isfinite(np.tan(u))))
        raise ValueError(f"non-finite cost (control blowup near step {bad})")

    dJ_dy = 2.0 * weights.q_d * dev + risk_params.lambda_grid * drisk_dy
    dJ_dpsi = np.zeros(n + 1)
    dJ_du = 2.0 * weights.q_u * u + weights.lambda_curve * 2.0 * tan_u * (1.0 + tan_u**2)
    grad = backprop_through_rollout(u, psi_plan, dJ_dy, dJ_dpsi, dJ_du, ds, l_r)
    breakdown = {
        "deviation": cost_dev,
        "risk": risk_params.lambda_grid * risk,
        "effort": cost_effort,
        "curvature": cost_curve,
    }
    return cost, grad, breakdown

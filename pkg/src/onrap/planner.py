"""Single-shooting solver for the spatial-domain planning NLP.

Decision variables are the N slip-angle controls; states are eliminated
through the bicycle rollout.  Control boxes are handled by the inner
L-BFGS-B solver, heading and lateral-corridor boxes by an outer
augmented-Lagrangian loop (multiplier updates plus penalty growth when the
violation stalls), and a final feasibility gate rejects any iterate that
violates the heading constraints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from . import cost as cost_mod
from .cost import ObjectiveWeights, RiskParams
from .kinematics import PlanarState, VehicleGeometry, rollout
from .occupancy import EgoGrid
from .reference import ReferencePath


class InfeasibleStartError(ValueError):
    """Initial heading outside the admissible heading box."""


@dataclass
class PlannerParams:
    horizon: float = 10.0
    ds: float = 0.5
    u_min: float = -1.0
    u_max: float = 1.0
    psi_min: float = -0.5
    psi_max: float = 0.5
    eps_buffer: float = 0.05
    y_lb: Union[float, np.ndarray] = -3.75
    y_ub: Union[float, np.ndarray] = 3.75
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    risk: RiskParams = field(
        default_factory=lambda: RiskParams(
            sigma=1.5, tau=2.0 / 3.0, lambda_grid=100.0, alpha_decay=0.95
        )
    )
    geometry: VehicleGeometry = field(
        default_factory=lambda: VehicleGeometry(l_f=1.0, l_r=1.0)
    )
    stepwise_heading: bool = False  # per-step heading+slip inequalities instead
    grad_tol: float = 1e-6
    constraint_tol: float = 1e-6
    max_inner_iter: int = 200
    max_outer_rounds: int = 8
    penalty0: float = 1e3

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("horizon must cover at least one step")
        half = math.pi / 2.0
        # Heading box must keep heading + slip inside the model's domain.
        if self.psi_max >= half - self.u_max - self.eps_buffer:
            raise ValueError("psi_max must stay below pi/2 - u_max - eps_buffer")
        if self.psi_min <= -half - self.u_min + self.eps_buffer:
            raise ValueError("psi_min must stay above -pi/2 - u_min + eps_buffer")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.ds))

    def y_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_steps + 1
        lb = np.broadcast_to(np.asarray(self.y_lb, dtype=float), (n,)).copy() \
            if np.ndim(self.y_lb) else np.full(n, float(self.y_lb))
        ub = np.broadcast_to(np.asarray(self.y_ub, dtype=float), (n,)).copy() \
            if np.ndim(self.y_ub) else np.full(n, float(self.y_ub))
        return lb, ub

    def corridor_within_5_sigma(self) -> bool:
        lb, ub = self.y_bounds()
        return bool(np.max(ub - lb) <= 5.0 * self.risk.sigma + 1e-12)


def default_planner_params(**overrides) -> PlannerParams:
    """Simulation-scale defaults (2 m x 1 m ego)."""
    return PlannerParams(**overrides)


@dataclass
class PlanResult:
    states: list[PlanarState]
    controls: np.ndarray
    cost: float
    breakdown: dict
    status: str                 # converged | max-iter | infeasible
    n_iter: int
    wall_time: float
    max_violation: float

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.states])

    @property
    def heading(self) -> np.ndarray:
        return np.array([s.heading for s in self.states])


@dataclass
class SolveResult:
    x: np.ndarray
    fun: float
    n_iter: int
    status: str
    max_violation: float


def solve_nlp(
    fun_grad: Callable[..., tuple[float, np.ndarray]],
    x0: np.ndarray,
    bounds: Optional[Sequence[tuple[float, float]]] = None,
    constraint_values: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    n_constraints: int = 0,
    grad_tol: float = 1e-6,
    constraint_tol: float = 1e-6,
    max_inner_iter: int = 200,
    max_outer_rounds: int = 8,
    penalty0: float = 1e3,
) -> SolveResult:
    """Box-constrained quasi-Newton solve with an outer constraint loop.

    fun_grad(x, mu, lam) must return the objective including the augmented
    penalty terms for the inequality constraints g(x) <= 0 (multiplier
    estimate max(0, lam + mu*g) per constraint) and its gradient.
    constraint_values(x) returns the raw g values; None means the problem is
    unconstrained beyond the variable boxes and a single inner solve is run.
    Feasibility is driven to `constraint_tol` by multiplier updates plus
    penalty growth whenever the violation stalls.
    """
    x = np.asarray(x0, dtype=float).copy()
    lam = np.zeros(n_constraints)
    if not np.isfinite(fun_grad(x, 0.0, lam)[0]):
        raise ValueError("objective non-finite at the initial guess")
    mu = penalty0
    total_iter = 0
    rounds = max_outer_rounds if constraint_values is not None else 1
    prev_viol = math.inf
    for _ in range(rounds):
        res = minimize(
            fun_grad,
            x,
            args=(mu if constraint_values is not None else 0.0, lam),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_inner_iter, "gtol": grad_tol, "ftol": 1e-14},
        )
        x = res.x
        total_iter += res.nit
        if constraint_values is None:
            return SolveResult(x, float(res.fun), total_iter, "converged", 0.0)
        g = constraint_values(x)
        viol = float(max(g.max(initial=0.0), 0.0))
        if viol <= constraint_tol:
            return SolveResult(x, float(fun_grad(x, 0.0, lam * 0)[0]),
                               total_iter, "converged", viol)
        lam = np.maximum(0.0, lam + mu * g)
        if viol > 0.25 * prev_viol:
            mu *= 10.0
        prev_viol = viol
    return SolveResult(x, float(fun_grad(x, 0.0, lam * 0)[0]), total_iter,
                       "max-iter", float(max(constraint_values(x).max(), 0.0)))


def warm_start_shift(previous: Optional[PlanResult], n_steps: int) -> np.ndarray:
    """Receding-horizon initial guess: drop the first control, repeat the last.

    Cold start (no previous plan) is the all-zero sequence.
    """
    if previous is None or len(previous.controls) < 2:
        return np.zeros(n_steps)
    shifted = np.empty(n_steps)
    src = previous.controls
    m = min(len(src) - 1, n_steps)
    shifted[:m] = src[1 : 1 + m]
    shifted[m:] = src[-1]
    return shifted


def _safe_trig(theta: float, lim: float):
    """tan(theta) and 1/cos(theta) with C1 linear extension beyond |theta|=lim.

    Returns (tan, dtan, invcos, dinvcos).  Inside the limit these are the
    exact values; outside they grow linearly so the shooting objective stays
    finite and differentiable at any iterate the inner solver visits.
    """
    if -lim < theta < lim:
        c = math.cos(theta)
        t = math.tan(theta)
        return t, 1.0 / (c * c), 1.0 / c, math.sin(theta) / (c * c)
    sign = 1.0 if theta >= 0 else -1.0
    excess = abs(theta) - lim
    c = math.cos(lim)
    tan_lim = math.tan(lim)
    dtan = 1.0 / (c * c)
    inv_lim = 1.0 / c
    dinv = math.sin(lim) / (c * c)
    # tan is odd, 1/cos is even in theta
    return (
        sign * (tan_lim + dtan * excess),
        dtan,
        inv_lim + dinv * excess,
        sign * dinv,
    )


def shooting_rollout(
    y0: float,
    psi0: float,
    u: np.ndarray,
    ds: float,
    l_r: float,
    lim: float,
):
    """Rollout with the extended trig functions; also returns the per-step
    (dtan, invcos, dinvcos) arrays for the adjoint pass."""
    n = len(u)
    y = np.empty(n + 1)
    psi = np.empty(n + 1)
    dtan = np.empty(n)
    invcos = np.empty(n)
    dinv = np.empty(n)
    y[0], psi[0] = y0, psi0
    for k in range(n):
        t, dt_k, ic, di = _safe_trig(psi[k] + u[k], lim)
        dtan[k], invcos[k], dinv[k] = dt_k, ic, di
        y[k + 1] = y[k] + t * ds
        psi[k + 1] = psi[k] + ds / l_r * math.sin(u[k]) * ic
    return y, psi, (dtan, invcos, dinv)


def plan(
    initial: PlanarState,
    grids: Union[EgoGrid, Sequence[EgoGrid]],
    ref: ReferencePath,
    params: PlannerParams,
    warm_start: Optional[np.ndarray] = None,
    u_prev: Optional[float] = None,
    u_slew: Optional[float] = None,
) -> PlanResult:
    """Solve the planning NLP from `initial` against the given occupancy.

    When both u_prev and u_slew are given, the first control (the one that
    is executed before the next replan) is additionally boxed to
    u_prev +- u_slew, modelling steering continuity between cycles.
    """
    t_start = time.perf_counter()
    if not params.psi_min < initial.heading < params.psi_max:
        raise InfeasibleStartError(
            f"initial heading {initial.heading:.4f} outside "
            f"({params.psi_min}, {params.psi_max})"
        )
    n = params.n_steps
    if ref.n_steps != n:
        raise ValueError("reference not resampled to the planner horizon")
    ds = params.ds
    l_r = params.geometry.l_r
    occ, y_rows = cost_mod.occupancy_matrix(grids, ds, n)
    y_lb, y_ub = params.y_bounds()
    theta_gate = math.pi / 2.0 - params.eps_buffer
    trig_lim = math.pi / 2.0 - params.eps_buffer / 2.0
    w = params.weights
    rp = params.risk
    y_ref = np.asarray(ref.y_ref, dtype=float)

    def base_terms(y, psi, u):
        risk, drisk_dy = cost_mod._risk_and_gradient(y, occ, y_rows, rp)
        dev = y - y_ref
        tan_u = np.tan(u)
        f = (
            w.q_d * float(dev @ dev)
            + rp.lambda_grid * risk
            + w.q_u * float(u @ u)
            + w.lambda_curve * float(tan_u @ tan_u)
        )
        dJ_dy = 2.0 * w.q_d * dev + rp.lambda_grid * drisk_dy
        dJ_du = 2.0 * w.q_u * u + w.lambda_curve * 2.0 * tan_u * (1.0 + tan_u**2)
        return f, dJ_dy, dJ_du

    def state_constraints(y, psi, u):
        """Inequality residuals g <= 0 for the state boxes (y_0, psi_0 fixed)."""
        if params.stepwise_heading:
            theta = psi[:-1] + u
            h_hi = theta - theta_gate
            h_lo = -theta_gate - theta
        else:
            h_hi = psi[1:] - params.psi_max
            h_lo = params.psi_min - psi[1:]
        return np.concatenate([y[1:] - y_ub[1:], y_lb[1:] - y[1:], h_hi, h_lo])

    def fun_grad(u, mu, lam):
        u = np.asarray(u, dtype=float)
        y, psi, trig = shooting_rollout(initial.y, initial.heading, u, ds, l_r, trig_lim)
        f, dJ_dy, dJ_du = base_terms(y, psi, u)
        dJ_dpsi = np.zeros(n + 1)
        if mu > 0.0:
            # augmented-Lagrangian term; m is the active multiplier estimate
            g = state_constraints(y, psi, u)
            m = np.maximum(0.0, lam + mu * g)
            f += float(m @ m - lam @ lam) / (2.0 * mu)
            dJ_dy[1:] += m[:n] - m[n : 2 * n]
            d = m[2 * n : 3 * n] - m[3 * n :]
            if params.stepwise_heading:
                dJ_dpsi[:-1] += d
                dJ_du += d
            else:
                dJ_dpsi[1:] += d
        grad = cost_mod.backprop_through_rollout(
            u, psi, dJ_dy, dJ_dpsi, dJ_du, ds, l_r, trig_override=trig
        )
        return f, grad

    def constraint_values(u):
        u = np.asarray(u, dtype=float)
        y, psi, _ = shooting_rollout(initial.y, initial.heading, u, ds, l_r, trig_lim)
        return state_constraints(y, psi, u)

    def violation(u):
        y, psi, _ = shooting_rollout(initial.y, initial.heading, u, ds, l_r, trig_lim)
        theta = psi[:-1] + np.asarray(u)
        v = max(
            float(np.max(np.abs(theta)) - theta_gate),
            float(np.max(y[1:] - y_ub[1:], initial=0.0)),
            float(np.max(y_lb[1:] - y[1:], initial=0.0)),
        )
        if not params.stepwise_heading:
            v = max(
                v,
                float(np.max(psi[1:] - params.psi_max, initial=0.0)),
                float(np.max(params.psi_min - psi[1:], initial=0.0)),
            )
        return v

    x0 = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float)
    x0 = np.clip(x0, params.u_min, params.u_max)
    bounds = [(params.u_min, params.u_max)] * n
    if u_prev is not None and u_slew is not None:
        lo = max(params.u_min, u_prev - u_slew)
        hi = min(params.u_max, u_prev + u_slew)
        if lo > hi:
            lo = hi = min(max(u_prev, params.u_min), params.u_max)
        bounds[0] = (lo, hi)
        x0[0] = min(max(x0[0], lo), hi)

    no_lam = np.zeros(4 * n)

    # Track the best feasible iterate (the zero/warm initial guess included).
    candidates = []
    if violation(x0) <= params.constraint_tol:
        candidates.append((float(fun_grad(x0, 0.0, no_lam)[0]), x0.copy()))

    res = solve_nlp(
        fun_grad,
        x0,
        bounds=bounds,
        constraint_values=constraint_values,
        n_constraints=4 * n,
        grad_tol=params.grad_tol,
        constraint_tol=params.constraint_tol,
        max_inner_iter=params.max_inner_iter,
        max_outer_rounds=params.max_outer_rounds,
        penalty0=params.penalty0,
    )
    status = res.status
    if violation(res.x) <= params.constraint_tol:
        candidates.append((res.fun, res.x))
    if not candidates:
        # Feasibility gate: reject the infeasible iterate outright and fall
        # back to the straight-line guess if even that is unavailable.
        zeros = np.zeros(n)
        zeros[0] = min(max(zeros[0], bounds[0][0]), bounds[0][1])
        if violation(zeros) <= params.constraint_tol:
            candidates.append((float(fun_grad(zeros, 0.0, no_lam)[0]), zeros))
            status = "max-iter"
        else:
            raise InfeasibleStartError("no feasible iterate found")
    best_cost, best_u = min(candidates, key=lambda c: c[0])

    # Gate tolerance may leave |theta| a hair past pi/2 - eps_buffer, so the
    # exact rollout uses the same slightly wider limit as the shooting pass.
    states = rollout(initial, best_u, ds, params.geometry, params.eps_buffer / 2)
    y = np.array([s.y for s in states])
    psi = np.array([s.heading for s in states])
    _, _, breakdown = cost_mod.objective_terms(
        best_u, y, psi, y_ref, grids, w, rp, ds, l_r
    )
    return PlanResult(
        states=states,
        controls=best_u,
        cost=best_cost,
        breakdown=breakdown,
        status=status,
        n_iter=res.n_iter,
        wall_time=time.perf_counter() - t_start,
        max_violation=violation(best_u),
    )

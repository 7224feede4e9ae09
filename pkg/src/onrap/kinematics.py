"""Spatial-domain kinematic bicycle model.

The model advances the vehicle by a fixed longitudinal step ``ds`` instead of a
time step, so the lateral position and heading become functions of the control
(slip angle) sequence only.  It is well defined while heading + slip stays
inside (-pi/2, pi/2); crossing that boundary is treated as a hard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

# Keeps tan() well-conditioned: the open validity interval is shrunk by this
# buffer on both sides before a step is accepted.
DOMAIN_BUFFER = 0.05


class DomainError(ValueError):
    """heading + slip left the open interval (-pi/2, pi/2) minus the buffer."""


@dataclass(frozen=True)
class PlanarState:
    """Ego pose in the planning frame."""

    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class VehicleGeometry:
    l_f: float
    l_r: float
    length: float = 2.0
    width: float = 1.0

    def __post_init__(self):
        if min(self.l_f, self.l_r, self.length, self.width) <= 0.0:
            raise ValueError("vehicle geometry values must be strictly positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


def slip_to_steer(slip: float, geom: VehicleGeometry) -> float:
    """Physical steering angle corresponding to a slip-angle control.

    Read-only diagnostic; the planner optimizes the slip angle directly.
    """
    return math.atan(geom.wheelbase / geom.l_r * math.tan(slip))


def steer_to_slip(steer: float, geom: VehicleGeometry) -> float:
    return math.atan(geom.l_r / geom.wheelbase * math.tan(steer))


def step(
    state: PlanarState,
    u: float,
    ds: float,
    l_r: float,
    eps_dom: float = DOMAIN_BUFFER,
) -> PlanarState:
    """One fixed-longitudinal-step update of the spatial bicycle model."""
    theta = state.heading + u
    limit = math.pi / 2.0 - eps_dom
    if not -limit < theta < limit:
        raise DomainError(
            f"heading + slip = {theta:.6f} rad outside (-{limit:.6f}, {limit:.6f})"
        )
    y = state.y + math.tan(theta) * ds
    heading = state.heading + ds / l_r * math.sin(u) / math.cos(theta)
    return PlanarState(state.x + ds, y, heading)


def rollout(
    state0: PlanarState,
    controls: Sequence[float],
    ds: float,
    geom: VehicleGeometry,
    eps_dom: float = DOMAIN_BUFFER,
) -> list[PlanarState]:
    """Apply `step` recursively; returns N+1 states starting with state0."""
    states = [state0]
    for k, u in enumerate(controls):
        try:
            states.append(step(states[-1], float(u), ds, geom.l_r, eps_dom))
        except DomainError as err:
            raise DomainError(f"step {k}: {err}") from None
    return states


def time_domain_oracle(
    state0: PlanarState,
    steer: float,
    arc_length: float,
    geom: VehicleGeometry,
    n_substeps: int = 2000,
) -> PlanarState:
    """Terminal pose of a constant-steer kinematic bicycle after `arc_length`.

    Dense RK4 integration over traveled arc length; independent of the spatial
    stepping above, used as a validation oracle.
    """
    if n_substeps < 1:
        raise ValueError("n_substeps must be >= 1")
    if arc_length < 0:
        raise ValueError("arc_length must be non-negative")
    beta = steer_to_slip(steer, geom)
    h = arc_length / n_substeps
    x, y, psi = state0.x, state0.y, state0.heading
    dpsi = math.sin(beta) / geom.l_r  # constant along the arc

    def deriv(psi_val):
        return math.cos(psi_val + beta), math.sin(psi_val + beta), dpsi

    for _ in range(n_substeps):
        k1 = deriv(psi)
        k2 = deriv(psi + 0.5 * h * k1[2])
        k3 = deriv(psi + 0.5 * h * k2[2])
        k4 = deriv(psi + h * k3[2])
        x += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        psi += h * dpsi
    return PlanarState(x, y, psi)


def time_domain_until_x(
    state0: PlanarState,
    steer: float,
    x_target: float,
    geom: VehicleGeometry,
    n_substeps: int = 10000,
) -> PlanarState:
    """Like `time_domain_oracle` but stops when the longitudinal coordinate
    reaches `x_target` (the spatial model steps in x, not arc length)."""
    beta = steer_to_slip(steer, geom)
    dpsi = math.sin(beta) / geom.l_r
    # Arc is longer than the x distance; generous upper bound, fine substeps.
    h = 2.0 * (x_target - state0.x) / n_substeps
    x, y, psi = state0.x, state0.y, state0.heading
    while x < x_target:
        xn = x + h * math.cos(psi + beta)
        yn = y + h * math.sin(psi + beta)
        pn = psi + h * dpsi
        if xn >= x_target:
            frac = (x_target - x) / (xn - x)
            return PlanarState(
                x_target, y + frac * (yn - y), psi + frac * (pn - psi)
            )
        x, y, psi = xn, yn, pn
        if abs(psi + beta) >= math.pi / 2:
            raise DomainError("time-domain path turned back before x_target")
    return PlanarState(x, y, psi)

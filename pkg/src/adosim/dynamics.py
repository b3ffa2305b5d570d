"""Kinematic bicycle model with third-order Runge-Kutta stepping.

State is (x, y, phi, delta, v): position, heading, steering angle, speed.
Controls are steering velocity and longitudinal acceleration, held constant
over each integration step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import FootprintDims, wrap_angle

DT_DEFAULT = 0.1  # simulation step, seconds (10 Hz control)


@dataclass(frozen=True)
class ControlLimits:
    """Actuation bounds; defaults sized for a full-scale car at 15-30 kph."""

    delta_max: float = 0.5236  # rad, ~30 deg
    u_delta_max: float = 1.0   # rad/s
    u_a_max: float = 3.0       # m/s^2


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.8
    footprint: FootprintDims = field(default_factory=lambda: FootprintDims(4.2, 1.8))
    limits: ControlLimits = field(default_factory=ControlLimits)

    def __post_init__(self):
        if self.wheelbase <= 0.0:
            raise ValueError("wheelbase must be positive")
        if self.wheelbase >= self.footprint.length:
            raise ValueError("wheelbase must be shorter than the footprint length")


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    phi: float
    delta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi, self.delta, self.v])


@dataclass(frozen=True)
class ControlInput:
    u_delta: float  # steering velocity, rad/s
    u_a: float      # acceleration, m/s^2


def derivative(s: AgentState, u: ControlInput, p: VehicleParams) -> np.ndarray:
    """Continuous-time state derivative [ẋ, ẏ, φ̇, δ̇, v̇]."""
    return np.array([
        s.v * math.cos(s.phi),
        s.v * math.sin(s.phi),
        s.v / p.wheelbase * math.tan(s.delta),
        u.u_delta,
        u.u_a,
    ])


def _deriv_vec(y: np.ndarray, u: ControlInput, p: VehicleParams) -> np.ndarray:
    return np.array([
        y[4] * math.cos(y[2]),
        y[4] * math.sin(y[2]),
        y[4] / p.wheelbase * math.tan(y[3]),
        u.u_delta,
        u.u_a,
    ])


def step_rk3(s: AgentState, u: ControlInput, p: VehicleParams, dt: float = DT_DEFAULT) -> AgentState:
    """Advance one step with Kutta's third-order scheme, inputs held constant.

    Stages at 0, dt/2, dt with weights 1/6, 2/3, 1/6. Heading is re-wrapped
    and steering/speed are clamped to their bounds after the step.
    """
    y0 = s.as_array()
    k1 = _deriv_vec(y0, u, p)
    k2 = _deriv_vec(y0 + 0.5 * dt * k1, u, p)
    k3 = _deriv_vec(y0 - dt * k1 + 2.0 * dt * k2, u, p)
    y = y0 + dt / 6.0 * (k1 + 4.0 * k2 + k3)
    lim = p.limits
    return AgentState(
        x=y[0],
        y=y[1],
        phi=wrap_angle(y[2]),
        delta=min(max(y[3], -lim.delta_max), lim.delta_max),
        v=max(y[4], 0.0),
    )


def steering_command_to_rate(
    delta_cmd: float, s: AgentState, dt: float = DT_DEFAULT, limits: ControlLimits = ControlLimits()
) -> float:
    """Rate command that moves the steering angle toward delta_cmd in one step,
    clamped to the actuator's rate bound."""
    rate = (delta_cmd - s.delta) / dt
    return min(max(rate, -limits.u_delta_max), limits.u_delta_max)

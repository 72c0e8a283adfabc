"""Skid-steer ground-truth plant: kinematics, dynamics, wheel maps, RK4 stepping.

The pose kinematics couple the yaw rate into the lateral velocity through the
longitudinal offset x0 of the instantaneous centre of rotation, which is what
makes skid-steer tracking hard: v_y = -x0 * omega at all times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .config import load_kv, write_kv, packaged_default

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


@dataclass(frozen=True)
class VehicleParams:
    """Physical plant parameters.

    r, c are the wheel radius and half axle track (m). c1..c6 are the positive
    dynamic coefficients of the two-row velocity dynamics (c1, c2 inertia-like;
    c3, c5 coupling; c4, c6 damping). x0 is the true longitudinal ICR offset.
    v_r_max / w_r_max cap the reference inputs before they enter the dynamics.
    """

    r: float = 0.098
    c: float = 0.1875
    c1: float = 10.0
    c2: float = 2.0
    c3: float = 1.5
    c4: float = 8.0
    c5: float = 1.2
    c6: float = 4.0
    x0: float = 0.05
    v_r_max: float = 60.0
    w_r_max: float = 80.0

    def __post_init__(self):
        if self.r <= 0 or self.c <= 0:
            raise ValueError("wheel radius and half track must be positive")
        for name in ("c1", "c2", "c3", "c4", "c5", "c6"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.v_r_max <= 0 or self.w_r_max <= 0:
            raise ValueError("actuator caps must be positive")

    def scaled(self, signs, fraction: float, x0=None) -> "VehicleParams":
        """Corner copy: each ci scaled by (1 + sign*fraction); optional x0 override."""
        vals = {f"c{i+1}": getattr(self, f"c{i+1}") * (1.0 + s * fraction)
                for i, s in enumerate(signs)}
        if x0 is not None:
            vals["x0"] = x0
        return replace(self, **vals)

    @classmethod
    def from_file(cls, path) -> "VehicleParams":
        return cls(**{k: float(v) for k, v in load_kv(path).items()})

    @classmethod
    def nominal(cls) -> "VehicleParams":
        return cls(**{k: float(v) for k, v in packaged_default("vehicle_nominal.txt").items()})

    def to_file(self, path):
        keys = ("r", "c", "c1", "c2", "c3", "c4", "c5", "c6", "x0",
                "v_r_max", "w_r_max")
        write_kv(path, {k: getattr(self, k) for k in keys},
                 header="vehicle parameters (SI units: m, and the c1..c6 coefficients)")


@dataclass
class RobotState:
    """Pose (x, y, theta) plus body velocities (v_x, omega)."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v_x: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        self.theta = wrap_angle(self.theta)

    def lateral_velocity(self, x0: float) -> float:
        """Body-frame lateral velocity implied by the ICR constraint."""
        return -x0 * self.omega


@dataclass(frozen=True)
class WheelSpeeds:
    right: float
    left: float

    def __post_init__(self):
        if not (math.isfinite(self.right) and math.isfinite(self.left)):
            raise ValueError("wheel speeds must be finite")


@dataclass(frozen=True)
class TerrainProfile:
    """Wheel-terrain disturbance levels applied to the kinematic rates.

    slip is a dimensionless longitudinal ratio (0.25 = 25% of forward speed
    lost), skid an undesired body-lateral velocity in m/s.
    """

    slip_mean: float = 0.0
    slip_std: float = 0.0
    skid_mean: float = 0.0
    skid_std: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.slip_mean < 1.0):
            raise ValueError("slip_mean must be in [0, 1)")
        if self.slip_std < 0 or self.skid_std < 0:
            raise ValueError("noise std must be >= 0")
        if self.slip_mean + 3.0 * self.slip_std >= 1.0:
            raise ValueError("slip_mean + 3*slip_std must stay below 1")

    @property
    def is_identity(self) -> bool:
        return (self.slip_mean == 0.0 and self.slip_std == 0.0
                and self.skid_mean == 0.0 and self.skid_std == 0.0)


def kinematics_rate(state: RobotState, x0: float):
    """Pose rate (xdot, ydot, thetadot) for the current body velocities."""
    st, ct = math.sin(state.theta), math.cos(state.theta)
    return (state.v_x * ct + x0 * state.omega * st,
            state.v_x * st - x0 * state.omega * ct,
            state.omega)


def dynamics_rate(state: RobotState, u, params: VehicleParams):
    """(v_x_dot, omega_dot) for reference inputs u = (v_x_r, omega_r)."""
    v, w = state.v_x, state.omega
    vdot = (params.c3 * w * w - params.c4 * v + u[0]) / params.c1
    wdot = (-params.c5 * v * w - params.c6 * w + u[1]) / params.c2
    return vdot, wdot


def wheel_to_body(wheels: WheelSpeeds, params: VehicleParams):
    """Body velocities from wheel angular velocities (no slip, no skid)."""
    v_x = 0.5 * params.r * (wheels.right + wheels.left)
    omega = 0.5 * params.r / params.c * (wheels.right - wheels.left)
    return v_x, omega


def body_to_wheel(v_x: float, omega: float, params: VehicleParams) -> WheelSpeeds:
    """Inverse of wheel_to_body."""
    right = (v_x + params.c * omega) / params.r
    left = (v_x - params.c * omega) / params.r
    return WheelSpeeds(right=right, left=left)


def sample_slip_skid(terrain: TerrainProfile, rng):
    """Draw one (slip, skid) disturbance pair; slip clipped into [0, 1)."""
    slip = rng.normal(terrain.slip_mean, terrain.slip_std) if terrain.slip_std else terrain.slip_mean
    skid = rng.normal(terrain.skid_mean, terrain.skid_std) if terrain.skid_std else terrain.skid_mean
    return min(max(slip, 0.0), 0.999), skid


def apply_slip_skid(rates, theta: float, terrain: TerrainProfile, rng):
    """Perturb a pose rate with one sampled slip/skid draw.

    The longitudinal body rate is scaled by (1 - slip), the lateral body rate
    gets the skid velocity added, the heading rate is untouched. The rate is
    decomposed and recomposed through the heading, so the caller must pass the
    heading the rate was computed at.
    """
    slip, skid = sample_slip_skid(terrain, rng)
    xd, yd, thd = rates
    st, ct = math.sin(theta), math.cos(theta)
    v_long = (xd * ct + yd * st) * (1.0 - slip)
    v_lat = (-xd * st + yd * ct) + skid
    return (v_long * ct - v_lat * st, v_long * st + v_lat * ct, thd)


def _clamp(v, lim):
    return lim if v > lim else (-lim if v < -lim else v)


def _joint_rate(x, y, th, v, w, u1, u2, p: VehicleParams, slip, skid):
    st, ct = math.sin(th), math.cos(th)
    v_long = v * (1.0 - slip)
    v_lat = -p.x0 * w + skid
    return (v_long * ct - v_lat * st,
            v_long * st + v_lat * ct,
            w,
            (p.c3 * w * w - p.c4 * v + u1) / p.c1,
            (-p.c5 * v * w - p.c6 * w + u2) / p.c2)


def step(state: RobotState, u, dt: float, params: VehicleParams,
         terrain: TerrainProfile = None, rng=None) -> RobotState:
    """One fixed-step RK4 update of the joint (pose, velocity) state.

    The control input is held for the whole step and clamped to the actuator
    caps; the slip/skid draw is sampled once and held across the four stages so
    the integrated vector field stays smooth within the step.
    """
    if not (0.0 < dt <= 0.01):
        raise ValueError("dt must be in (0, 0.01] s")
    vals = (state.x, state.y, state.theta, state.v_x, state.omega, u[0], u[1])
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite state or input")
    if terrain is not None and not terrain.is_identity:
        slip, skid = sample_slip_skid(terrain, rng)
    else:
        slip, skid = 0.0, 0.0
    u1 = _clamp(u[0], params.v_r_max)
    u2 = _clamp(u[1], params.w_r_max)
    out = _rk4(state.x, state.y, state.theta, state.v_x, state.omega,
               u1, u2, dt, params, slip, skid)
    return RobotState(*out)


def _rk4(x, y, th, v, w, u1, u2, dt, p, slip, skid):
    k1 = _joint_rate(x, y, th, v, w, u1, u2, p, slip, skid)
    h = 0.5 * dt
    k2 = _joint_rate(x + h * k1[0], y + h * k1[1], th + h * k1[2],
                     v + h * k1[3], w + h * k1[4], u1, u2, p, slip, skid)
    k3 = _joint_rate(x + h * k2[0], y + h * k2[1], th + h * k2[2],
                     v + h * k2[3], w + h * k2[4], u1, u2, p, slip, skid)
    k4 = _joint_rate(x + dt * k3[0], y + dt * k3[1], th + dt * k3[2],
                     v + dt * k3[3], w + dt * k3[4], u1, u2, p, slip, skid)
    s = dt / 6.0
    return (x + s * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            y + s * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            wrap_angle(th + s * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])),
            v + s * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]),
            w + s * (k1[4] + 2 * k2[4] + 2 * k3[4] + k4[4]))


def step_hold(state: RobotState, u, dt: float, n: int, params: VehicleParams,
              terrain: TerrainProfile = None, rng=None) -> RobotState:
    """n RK4 substeps under a zero-order-held input (one slip/skid draw each)."""
    if not (0.0 < dt <= 0.01):
        raise ValueError("dt must be in (0, 0.01] s")
    vals = (state.x, state.y, state.theta, state.v_x, state.omega, u[0], u[1])
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite state or input")
    u1 = _clamp(u[0], params.v_r_max)
    u2 = _clamp(u[1], params.w_r_max)
    noisy = terrain is not None and not terrain.is_identity
    if noisy:
        slips = rng.normal(terrain.slip_mean, terrain.slip_std, size=n)
        skids = rng.normal(terrain.skid_mean, terrain.skid_std, size=n)
    x, y, th, v, w = state.x, state.y, state.theta, state.v_x, state.omega
    for i in range(n):
        if noisy:
            slip = min(max(slips[i], 0.0), 0.999)
            skid = skids[i]
        else:
            slip, skid = 0.0, 0.0
        x, y, th, v, w = _rk4(x, y, th, v, w, u1, u2, dt, params, slip, skid)
    return RobotState(x, y, th, v, w)

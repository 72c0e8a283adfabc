"""Sliding-mode trajectory tracking for the skid-steer plant.

Pipeline per control step: global pose error -> body-frame error -> error
rates -> sliding surfaces -> drift terms (phi) and their worst-case bounds
over the parameter uncertainty box -> equivalent plus saturated switching
control. The yaw channel is computed first because the longitudinal
equivalent term needs the full yaw command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import load_kv, write_kv, packaged_default
from .vehicle import RobotState, VehicleParams, wrap_angle


@dataclass(frozen=True)
class ControllerGains:
    """Surface slopes, reaching gains, boundary layers and the ICR bounds.

    lambda1/lambda2 must exceed 1 for the boundary-layer argument to close;
    x0_min must be negative so the guarded denominator x0_min - |eps1| stays
    bounded away from zero.
    """

    lambda1: float = 1.2
    lambda2: float = 2.6
    k1: float = 16.5
    k2: float = 20.5
    tau1: float = 2.5
    tau2: float = 3.5
    x0_min: float = -0.12
    x0_max: float = 0.15
    uncertainty_fraction: float = 0.25
    k_floor: float = 0.05

    def __post_init__(self):
        if self.lambda1 <= 1.0 or self.lambda2 <= 1.0:
            raise ValueError("lambda1 and lambda2 must be > 1")
        for name in ("k1", "k2", "tau1", "tau2", "k_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.x0_min < self.x0_max:
            raise ValueError("x0_min must be below x0_max")
        if self.x0_min >= 0.0:
            raise ValueError("x0_min must be negative so the denominator "
                             "guard x0_min - |eps1| cannot reach zero")
        if not (0.0 <= self.uncertainty_fraction < 1.0):
            raise ValueError("uncertainty_fraction must be in [0, 1)")

    @classmethod
    def from_file(cls, path) -> "ControllerGains":
        return cls(**{k: float(v) for k, v in load_kv(path).items()})

    @classmethod
    def table_defaults(cls) -> "ControllerGains":
        return cls(**{k: float(v) for k, v in packaged_default("gains_default.txt").items()})

    def to_file(self, path):
        keys = ("lambda1", "lambda2", "k1", "k2", "tau1", "tau2",
                "x0_min", "x0_max", "uncertainty_fraction")
        write_kv(path, {k: getattr(self, k) for k in keys},
                 header="sliding-mode controller gains")


@dataclass
class Reference:
    """Desired pose, feedforward velocities and their time derivatives."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v_x: float = 0.0
    omega: float = 0.0
    v_x_dot: float = 0.0
    omega_dot: float = 0.0

    def __post_init__(self):
        self.theta = wrap_angle(self.theta)
        if not all(math.isfinite(v) for v in
                   (self.x, self.y, self.theta, self.v_x, self.omega,
                    self.v_x_dot, self.omega_dot)):
            raise ValueError("reference fields must be finite")


@dataclass
class LocalError:
    """Body-frame tracking errors and the rates of the two position errors."""

    eps1: float
    eps2: float
    eps3: float
    eps1_dot: float = 0.0
    eps2_dot: float = 0.0

    def __post_init__(self):
        self.eps3 = wrap_angle(self.eps3)


@dataclass
class ControlOutput:
    v_x_r: float
    omega_r: float
    s1: float
    s2: float
    k1_certifiable: bool = True   # reaching gain k1 dominated the phi1 bound
    k2_certifiable: bool = True
    v_saturated: bool = False
    w_saturated: bool = False


def global_error(reference: Reference, state: RobotState):
    """Componentwise desired-minus-actual pose error, heading wrapped."""
    return (reference.x - state.x,
            reference.y - state.y,
            wrap_angle(reference.theta - state.theta))


def to_local_frame(q_e, theta: float):
    """Rotate the planar error into the robot frame; heading error passes through."""
    st, ct = math.sin(theta), math.cos(theta)
    return (ct * q_e[0] + st * q_e[1],
            -st * q_e[0] + ct * q_e[1],
            wrap_angle(q_e[2]))


def error_rates(eps, state: RobotState, reference: Reference, x0: float):
    """Time derivatives of the body-frame errors under the ICR kinematics."""
    e1, e2, e3 = eps[0], eps[1], eps[2]
    s3, c3 = math.sin(e3), math.cos(e3)
    w, vx = state.omega, state.v_x
    vd, wd = reference.v_x, reference.omega
    return (w * e2 + vd * c3 + wd * x0 * s3 - vx,
            (x0 - e1) * w + vd * s3 - wd * x0 * c3,
            wd - w)


def sliding_surfaces(eps: LocalError, eps_dot, gains: ControllerGains):
    """s_i = lambda_i * eps_i + eps_i_dot for the two position channels."""
    e1 = eps.eps1 if isinstance(eps, LocalError) else eps[0]
    e2 = eps.eps2 if isinstance(eps, LocalError) else eps[1]
    return (gains.lambda1 * e1 + eps_dot[0],
            gains.lambda2 * e2 + eps_dot[1])


def phi_terms(eps, state: RobotState, reference: Reference,
              params: VehicleParams, gains: ControllerGains, x0=None):
    """Drift terms of the surface derivatives.

    sdot1 = phi1 + eps2*omega_r/c2 - v_x_r/c1 and
    sdot2 = phi2 + (x0 - eps1)*omega_r/c2, so phi collects everything the
    inputs do not touch: plant drift, error-rate coupling and the reference
    feedforward. x0 defaults to params.x0.
    """
    if x0 is None:
        x0 = params.x0
    e1, e2, e3 = eps[0], eps[1], eps[2]
    s3, c3 = math.sin(e3), math.cos(e3)
    w, vx = state.omega, state.v_x
    vd, wd = reference.v_x, reference.omega
    vdd, wdd = reference.v_x_dot, reference.omega_dot

    e1d = w * e2 + vd * c3 + wd * x0 * s3 - vx
    e2d = (x0 - e1) * w + vd * s3 - wd * x0 * c3
    f_w = (-params.c5 * vx * w - params.c6 * w) / params.c2
    f_v = (params.c3 * w * w - params.c4 * vx) / params.c1

    phi1 = (gains.lambda1 * e1d + f_w * e2 + w * e2d - f_v
            + vdd * c3 - vd * (wd - w) * s3
            + wdd * x0 * s3 + wd * x0 * (wd - w) * c3)
    phi2 = (-w * e1d + (x0 - e1) * f_w
            + vdd * s3 + (wd - w) * vd * c3
            - wdd * x0 * c3 + (wd - w) * wd * x0 * s3
            + gains.lambda2 * e2d)
    return phi1, phi2


def _corner_table(params: VehicleParams, gains: ControllerGains):
    """(u, v, w, z, x0) arrays over the 2^6 ci corners x 2 ICR extremes.

    u = c3/c1, v = c4/c1, w = c5/c2, z = c6/c2 are the only coefficient
    combinations phi depends on, so evaluating them per corner is enough.
    """
    f = gains.uncertainty_fraction
    lo, hi = 1.0 - f, 1.0 + f
    grids = np.meshgrid(*[np.array([lo, hi])] * 6, indexing="ij")
    c = [g.ravel() * getattr(params, f"c{i+1}") for i, g in enumerate(grids)]
    u = np.concatenate([c[2] / c[0]] * 2)
    v = np.concatenate([c[3] / c[0]] * 2)
    w = np.concatenate([c[4] / c[1]] * 2)
    z = np.concatenate([c[5] / c[1]] * 2)
    n = c[0].size
    x0 = np.concatenate([np.full(n, gains.x0_min), np.full(n, gains.x0_max)])
    return u, v, w, z, x0


def _phi_vectorized(eps, state, reference, gains, u, v, w_r, z_r, x0):
    """phi1, phi2 over parameter arrays (u=c3/c1, v=c4/c1, w_r=c5/c2, z_r=c6/c2)."""
    e1, e2, e3 = eps[0], eps[1], eps[2]
    s3, c3 = math.sin(e3), math.cos(e3)
    w, vx = state.omega, state.v_x
    vd, wd = reference.v_x, reference.omega
    vdd, wdd = reference.v_x_dot, reference.omega_dot

    e1d = w * e2 + vd * c3 + wd * x0 * s3 - vx
    e2d = (x0 - e1) * w + vd * s3 - wd * x0 * c3
    f_w = -w_r * vx * w - z_r * w
    f_v = u * w * w - v * vx

    phi1 = (gains.lambda1 * e1d + f_w * e2 + w * e2d - f_v
            + vdd * c3 - vd * (wd - w) * s3
            + wdd * x0 * s3 + wd * x0 * (wd - w) * c3)
    phi2 = (-w * e1d + (x0 - e1) * f_w
            + vdd * s3 + (wd - w) * vd * c3
            - wdd * x0 * c3 + (wd - w) * wd * x0 * s3
            + gains.lambda2 * e2d)
    return phi1, phi2


def phi_bounds(eps, state: RobotState, reference: Reference,
               params: VehicleParams, gains: ControllerGains,
               corners=None):
    """Worst-case |phi_i| over the ci uncertainty corners and ICR extremes.

    phi is coordinatewise monotone in each ci and in x0 at a fixed state, so
    the box maximum sits on a corner; 2^6 coefficient corners times the two
    x0 bounds are enumerated outright.
    """
    if corners is None:
        corners = _corner_table(params, gains)
    p1, p2 = _phi_vectorized(eps, state, reference, gains, *corners)
    return float(np.max(np.abs(p1))), float(np.max(np.abs(p2)))


def saturation(ratio: float) -> float:
    """Linear inside the unit band, hard-limited outside."""
    if ratio > 1.0:
        return 1.0
    if ratio < -1.0:
        return -1.0
    return ratio


def equivalent_control(phi, eps, params: VehicleParams, gains: ControllerGains,
                       omega_r_full=None, exact_x0=None):
    """Equivalent control terms (v_x_hat, omega_hat).

    The yaw denominator uses the singularity guard x0_min - |eps1| (strictly
    negative by the gains invariant). Passing exact_x0 switches to the
    unguarded denominator exact_x0 - eps1 for nullification analysis with a
    known ICR offset. v_x_hat is formed with the full yaw command when the
    caller supplies it, otherwise with omega_hat alone.
    """
    e1, e2 = eps[0], eps[1]
    if exact_x0 is not None:
        den = exact_x0 - e1
        if den == 0.0:
            raise ZeroDivisionError("exact ICR denominator hit the singularity")
    else:
        den = gains.x0_min - abs(e1)
    w_hat = -params.c2 * phi[1] / den
    w_full = w_hat if omega_r_full is None else omega_r_full
    v_hat = params.c1 * (phi[0] + e2 * w_full / params.c2)
    return v_hat, w_hat


def switching_control(s, phi_bar, eps, params: VehicleParams,
                      gains: ControllerGains, switching: str = "sat"):
    """Saturated reaching terms (v_x_bar, omega_bar, k1_ok, k2_ok).

    K_i = k_i - phi_bar_i must be positive for the reaching condition to be
    certifiable; when it is not, it is clamped to the configured floor and
    flagged so the caller can log the gain insufficiency. switching="sign"
    restores the discontinuous law (test-only, for chattering comparison).
    """
    e1, e2 = eps[0], eps[1]
    den = gains.x0_min - abs(e1)
    k2_bar = gains.k2 - phi_bar[1]
    k2_ok = k2_bar > 0.0
    if not k2_ok:
        k2_bar = gains.k_floor
    k1_bar = gains.k1 - phi_bar[0]
    k1_ok = k1_bar > 0.0
    if not k1_ok:
        k1_bar = gains.k_floor

    if switching == "sat":
        sw2 = saturation(s[1] / gains.tau2)
        sw1 = saturation(s[0] / gains.tau1)
    elif switching == "sign":
        sw2 = math.copysign(1.0, s[1]) if s[1] != 0.0 else 0.0
        sw1 = math.copysign(1.0, s[0]) if s[0] != 0.0 else 0.0
    else:
        raise ValueError(f"unknown switching mode {switching!r}")

    w_bar = -(params.c2 / den) * k2_bar * sw2
    v_bar = -params.c1 * (phi_bar[0] + abs(e2 * w_bar) / params.c2 - gains.k1) * sw1
    return v_bar, w_bar, k1_ok, k2_ok


class SlidingModeController:
    """Stateless controller bound to one nominal plant model and gain set.

    Caches the uncertainty-corner table so the per-step bound evaluation is a
    handful of vectorized operations.
    """

    def __init__(self, params: VehicleParams, gains: ControllerGains):
        self.params = params
        self.gains = gains
        self._corners = _corner_table(params, gains)

    def control_step(self, state: RobotState, reference: Reference,
                     switching: str = "sat") -> ControlOutput:
        return control_step(state, reference, self.params, self.gains,
                            switching=switching, _corners=self._corners)


def control_step(state: RobotState, reference: Reference,
                 params: VehicleParams, gains: ControllerGains,
                 switching: str = "sat", _corners=None) -> ControlOutput:
    """Full control law: yaw command first, then the longitudinal command."""
    q_e = global_error(reference, state)
    eps = to_local_frame(q_e, state.theta)
    eps_dot = error_rates(eps, state, reference, params.x0)
    s = sliding_surfaces(LocalError(*eps, *eps_dot[:2]), eps_dot, gains)
    phi = phi_terms(eps, state, reference, params, gains)
    phi_bar = phi_bounds(eps, state, reference, params, gains, corners=_corners)

    v_bar, w_bar, k1_ok, k2_ok = switching_control(
        s, phi_bar, eps, params, gains, switching=switching)
    _, w_hat = equivalent_control(phi, eps, params, gains)
    w_r = w_hat + w_bar
    v_hat, _ = equivalent_control(phi, eps, params, gains, omega_r_full=w_r)
    v_r = v_hat + v_bar

    if not (math.isfinite(v_r) and math.isfinite(w_r)):
        raise ArithmeticError("controller produced a non-finite command")
    v_sat = abs(v_r) >= params.v_r_max
    w_sat = abs(w_r) >= params.w_r_max
    v_r = min(max(v_r, -params.v_r_max), params.v_r_max)
    w_r = min(max(w_r, -params.w_r_max), params.w_r_max)
    return ControlOutput(v_x_r=v_r, omega_r=w_r, s1=s[0], s2=s[1],
                         k1_certifiable=k1_ok, k2_certifiable=k2_ok,
                         v_saturated=v_sat, w_saturated=w_sat)


def surface_rates(state: RobotState, reference: Reference, u,
                  params: VehicleParams, gains: ControllerGains, x0=None):
    """Analytic (sdot1, sdot2) for a given applied input, using the true params."""
    if x0 is None:
        x0 = params.x0
    q_e = global_error(reference, state)
    eps = to_local_frame(q_e, state.theta)
    phi1, phi2 = phi_terms(eps, state, reference, params, gains, x0=x0)
    sdot1 = phi1 + eps[1] * u[1] / params.c2 - u[0] / params.c1
    sdot2 = phi2 + (x0 - eps[0]) * u[1] / params.c2
    return sdot1, sdot2


@dataclass
class CertificateReport:
    """Boundary-layer certificate: slope conditions, the yaw-layer inequality
    and the admissible longitudinal-error interval for the tau1 bound."""

    lambda1: float
    lambda2: float
    lambda1_ok: bool
    lambda2_ok: bool
    k_bar1: float
    k_bar2: float
    k_bar2_required: float     # tau2 / (4 * lambda2)
    tau2_ok: bool
    tau1: float
    eps1_admissible_min: float  # |eps1| above which the tau1 inequality holds
    eps1_scan_max: float
    violations: tuple = ()

    def to_text(self) -> str:
        lines = [
            f"lambda1 = {self.lambda1!r}",
            f"lambda2 = {self.lambda2!r}",
            f"lambda1_ok = {self.lambda1_ok}",
            f"lambda2_ok = {self.lambda2_ok}",
            f"k_bar1 = {self.k_bar1!r}",
            f"k_bar2 = {self.k_bar2!r}",
            f"k_bar2_required = {self.k_bar2_required!r}",
            f"tau2_ok = {self.tau2_ok}",
            f"tau1 = {self.tau1!r}",
            f"eps1_admissible_min = {self.eps1_admissible_min!r}",
            f"eps1_scan_max = {self.eps1_scan_max!r}",
        ]
        for v in self.violations:
            lines.append(f"violation = {v}")
        return "\n".join(lines) + "\n"

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_boundary_layers(gains: ControllerGains, phi_bar_worst,
                             eps1_scan_max: float = 1000.0) -> CertificateReport:
    """Report-only certificate check against worst-case phi bounds.

    The yaw layer must satisfy tau2 <= 4*lambda2*K2, i.e. K2 >= tau2/(4*lambda2).
    The longitudinal layer inequality
        tau1 <= lambda1*eps1^2 / (K1 + |16*K2^2*lambda2/(x0_min - |eps1|)| + |eps1|)
    degenerates as eps1 -> 0, so the report states the |eps1| interval on which
    it holds (ultimate boundedness into that neighbourhood).
    """
    violations = []
    l1_ok = gains.lambda1 > 1.0
    l2_ok = gains.lambda2 > 1.0
    if not l1_ok:
        violations.append("lambda1 <= 1 violates the layer-entry condition")
    if not l2_ok:
        violations.append("lambda2 <= 1 violates the layer-entry condition")

    k_bar1 = gains.k1 - phi_bar_worst[0]
    k_bar2 = gains.k2 - phi_bar_worst[1]
    required = gains.tau2 / (4.0 * gains.lambda2)
    tau2_ok = k_bar2 >= required
    if k_bar1 <= 0.0:
        violations.append("k1 does not dominate the worst-case phi1 bound")
    if k_bar2 <= 0.0:
        violations.append("k2 does not dominate the worst-case phi2 bound")
    if not tau2_ok:
        violations.append("tau2 exceeds 4*lambda2*K2")

    eps_min = math.inf
    if k_bar1 > 0.0 and k_bar2 > 0.0:
        grid = np.linspace(1e-6, eps1_scan_max, 200001)
        bound = (gains.lambda1 * grid ** 2
                 / (k_bar1 + np.abs(16.0 * k_bar2 ** 2 * gains.lambda2
                                    / (gains.x0_min - grid)) + grid))
        ok = np.nonzero(bound >= gains.tau1)[0]
        eps_min = float(grid[ok[0]]) if ok.size else math.inf
    if not math.isfinite(eps_min):
        violations.append("tau1 inequality holds nowhere on the scanned range")

    return CertificateReport(
        lambda1=gains.lambda1, lambda2=gains.lambda2,
        lambda1_ok=l1_ok, lambda2_ok=l2_ok,
        k_bar1=k_bar1, k_bar2=k_bar2, k_bar2_required=required,
        tau2_ok=tau2_ok, tau1=gains.tau1,
        eps1_admissible_min=eps_min, eps1_scan_max=eps1_scan_max,
        violations=tuple(violations))

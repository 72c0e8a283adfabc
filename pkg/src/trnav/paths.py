"""Scripted teach paths and analytic reference trajectories.

Teach paths are dense arc-length-parameterized polylines the teach driver
follows. Analytic references integrate the ICR kinematics under smooth
closed-form velocity profiles and are used by the controller tests, where the
reference must be exactly kinematics-consistent and twice differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .smc import Reference
from .vehicle import wrap_angle


@dataclass
class TeachPath:
    """Dense polyline with tangent headings, queried by arc-length."""

    xs: np.ndarray
    ys: np.ndarray
    s: np.ndarray
    headings: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def pose_at(self, s: float):
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.s) - 2)
        i = max(i, 0)
        f = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        x = self.xs[i] + f * (self.xs[i + 1] - self.xs[i])
        y = self.ys[i] + f * (self.ys[i + 1] - self.ys[i])
        dth = wrap_angle(self.headings[i + 1] - self.headings[i])
        return x, y, wrap_angle(self.headings[i] + f * dth)

    def nearest_s(self, x: float, y: float, s_hint: float, window: float = 3.0):
        """Arc-length of the nearest sample within a window around a hint."""
        lo = np.searchsorted(self.s, s_hint - window)
        hi = min(np.searchsorted(self.s, s_hint + window) + 1, len(self.s))
        d2 = (self.xs[lo:hi] - x) ** 2 + (self.ys[lo:hi] - y) ** 2
        return float(self.s[lo + int(np.argmin(d2))])


def _from_xy(xs, ys) -> TeachPath:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ds = np.hypot(np.diff(xs), np.diff(ys))
    keep = np.concatenate([[True], ds > 1e-12])
    xs, ys = xs[keep], ys[keep]
    ds = np.hypot(np.diff(xs), np.diff(ys))
    s = np.concatenate([[0.0], np.cumsum(ds)])
    headings = np.arctan2(np.gradient(ys, s), np.gradient(xs, s))
    return TeachPath(xs=xs, ys=ys, s=s, headings=headings)


def loop_path(length: float = 70.0, step: float = 0.01) -> TeachPath:
    """Closed circular loop of the requested circumference."""
    radius = length / (2.0 * math.pi)
    t = np.arange(0.0, length + step, step) / radius
    return _from_xy(radius * np.sin(t), radius * (1.0 - np.cos(t)))


def s_curve_path(length: float = 44.0, step: float = 0.01) -> TeachPath:
    """Open serpentine: sinusoidal lateral sweep along a straight axis."""
    amp = length / 10.0
    x_span = 0.92 * length        # rough; arc-length trimmed below
    x = np.arange(0.0, x_span, step * 0.5)
    y = amp * np.sin(2.0 * math.pi * x / (x_span / 2.0))
    path = _from_xy(x, y)
    keep = path.s <= length
    return TeachPath(xs=path.xs[keep], ys=path.ys[keep], s=path.s[keep],
                     headings=path.headings[keep])


def figure_eight_path(length: float = 70.0, step: float = 0.01) -> TeachPath:
    """Lemniscate-style figure of eight."""
    a = length / 6.1
    t = np.linspace(0.0, 2.0 * math.pi, int(length / step))
    x = a * np.sin(t)
    y = a * np.sin(t) * np.cos(t)
    path = _from_xy(x, y)
    return path


def waypoint_path(filename, step: float = 0.01) -> TeachPath:
    """Polyline through x,y waypoints from a two-column CSV file."""
    pts = np.loadtxt(filename, delimiter=",", ndmin=2)
    if pts.shape[0] < 2:
        raise ValueError("waypoint file needs at least two points")
    xs, ys = [], []
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        n = max(int(math.hypot(x1 - x0, y1 - y0) / step), 1)
        f = np.linspace(0.0, 1.0, n, endpoint=False)
        xs.append(x0 + f * (x1 - x0))
        ys.append(y0 + f * (y1 - y0))
    xs.append([pts[-1, 0]])
    ys.append([pts[-1, 1]])
    return _from_xy(np.concatenate(xs), np.concatenate(ys))


def build_path(name: str, length: float) -> TeachPath:
    if name == "loop":
        return loop_path(length)
    if name == "scurve":
        return s_curve_path(length)
    if name == "figure8":
        return figure_eight_path(length)
    return waypoint_path(name)


class AnalyticReference:
    """Reference trajectory integrated from smooth (v(t), w(t)) profiles.

    The pose follows the same ICR kinematics as the plant (with the supplied
    x0), so the tracking-error dynamics used by the controller hold exactly
    along it. Poses are precomputed on a fine fixed grid; queries snap to it.
    """

    def __init__(self, v_fn, w_fn, vdot_fn, wdot_fn, x0: float,
                 q0=(0.0, 0.0, 0.0), horizon: float = 60.0, dt: float = 1e-3):
        self.v_fn, self.w_fn = v_fn, w_fn
        self.vdot_fn, self.wdot_fn = vdot_fn, wdot_fn
        self.dt = dt
        n = int(round(horizon / dt)) + 1
        xs = np.empty(n); ys = np.empty(n); ths = np.empty(n)
        x, y, th = q0
        for i in range(n):
            xs[i], ys[i], ths[i] = x, y, th
            t = i * dt
            x, y, th = self._rk4(x, y, th, t, x0)
        self.xs, self.ys, self.ths = xs, ys, ths

    def _rate(self, th, t, x0):
        v, w = self.v_fn(t), self.w_fn(t)
        return (v * math.cos(th) + x0 * w * math.sin(th),
                v * math.sin(th) - x0 * w * math.cos(th),
                w)

    def _rk4(self, x, y, th, t, x0):
        dt = self.dt
        k1 = self._rate(th, t, x0)
        k2 = self._rate(th + 0.5 * dt * k1[2], t + 0.5 * dt, x0)
        k3 = self._rate(th + 0.5 * dt * k2[2], t + 0.5 * dt, x0)
        k4 = self._rate(th + dt * k3[2], t + dt, x0)
        return (x + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                y + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
                th + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))

    def at(self, t: float) -> Reference:
        i = int(round(t / self.dt))
        if not (0 <= i < len(self.xs)):
            raise ValueError("query beyond the precomputed horizon")
        return Reference(x=self.xs[i], y=self.ys[i], theta=wrap_angle(self.ths[i]),
                         v_x=self.v_fn(t), omega=self.w_fn(t),
                         v_x_dot=self.vdot_fn(t), omega_dot=self.wdot_fn(t))


def s_curve_reference(x0: float, speed: float = 0.35, horizon: float = 60.0,
                      weave: float = 0.35, weave_rate: float = 0.25) -> AnalyticReference:
    """Serpentine analytic reference at constant speed with a sinusoidal yaw rate."""
    return AnalyticReference(
        v_fn=lambda t: speed,
        w_fn=lambda t: weave * math.sin(weave_rate * t),
        vdot_fn=lambda t: 0.0,
        wdot_fn=lambda t: weave * weave_rate * math.cos(weave_rate * t),
        x0=x0, horizon=horizon)

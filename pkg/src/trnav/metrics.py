"""Trial metrics: per-component mean absolute errors and the distance error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vehicle import wrap_angle


@dataclass
class TrialMetrics:
    mae_x: float
    mae_y: float
    mae_theta_deg: float
    mean_dist: float
    stable: bool
    completion: float = 1.0

    @property
    def status(self) -> str:
        return "stable" if self.stable else "unstable"

    def as_dict(self) -> dict:
        return {"mae_x": self.mae_x, "mae_y": self.mae_y,
                "mae_theta_deg": self.mae_theta_deg, "mean_dist": self.mean_dist,
                "stability_status": self.status, "completion": self.completion}


def compute_metrics(actual, reference, stable: bool = True,
                    completion: float = 1.0) -> TrialMetrics:
    """Errors of an actual (n, 3) pose log against a time-aligned reference log.

    Heading error is wrapped and reported in degrees; the distance error is
    the planar norm per sample. Logs must share their sample count.
    """
    a = np.asarray(actual, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.shape != r.shape or a.ndim != 2 or a.shape[1] < 3:
        raise ValueError("logs must be time-aligned (n, 3) pose arrays")
    if a.shape[0] == 0:
        raise ValueError("empty logs")
    ex = r[:, 0] - a[:, 0]
    ey = r[:, 1] - a[:, 1]
    eth = np.array([wrap_angle(d) for d in (r[:, 2] - a[:, 2])])
    dist = np.hypot(ex, ey)
    if not stable:
        completion = min(completion, 1.0)
    return TrialMetrics(
        mae_x=float(np.mean(np.abs(ex))),
        mae_y=float(np.mean(np.abs(ey))),
        mae_theta_deg=float(np.degrees(np.mean(np.abs(eth)))),
        mean_dist=float(np.mean(dist)),
        stable=stable,
        completion=completion)

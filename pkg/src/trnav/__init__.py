"""Teach-and-repeat navigation simulator and robust-control library."""

from .vehicle import (RobotState, VehicleParams, TerrainProfile, WheelSpeeds,
                      kinematics_rate, dynamics_rate, wheel_to_body,
                      body_to_wheel, step, wrap_angle)
from .smc import (ControllerGains, Reference, ControlOutput,
                  SlidingModeController, control_step,
                  validate_boundary_layers)

__all__ = [
    "RobotState", "VehicleParams", "TerrainProfile", "WheelSpeeds",
    "kinematics_rate", "dynamics_rate", "wheel_to_body", "body_to_wheel",
    "step", "wrap_angle", "ControllerGains", "Reference", "ControlOutput",
    "SlidingModeController", "control_step", "validate_boundary_layers",
]

"""Planar two-track vehicle model.

Serves double duty: as the synthetic "real plant" (perturbed parameters plus
sensor noise) and as the black-box digital twin whose states the observer
corrects. Ten states, simplified magic-formula tires with friction-circle
coupling, explicit RK4 integration at 100 Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from ._kernels import GRAVITY, RAD2DEG

KMH = 3.6  # m/s -> km/h

STATE_NAMES = ("x", "y", "psi", "v_x", "v_y", "omega_z",
               "omega_fl", "omega_fr", "omega_rl", "omega_rr")
SENSOR_NAMES = ("a_x", "a_y", "a_z", "wx", "wy", "wz",
                "enc_fl", "enc_fr", "enc_rl", "enc_rr")

MAX_STEER = 0.6  # rad, driver-input envelope


@dataclass(frozen=True)
class VehicleState:
    """Full twin state. Velocities in m/s, angles rad, rates rad/s."""
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    omega_z: float = 0.0
    omega_fl: float = 0.0
    omega_fr: float = 0.0
    omega_rl: float = 0.0
    omega_rr: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v_x, self.v_y,
                         self.omega_z, self.omega_fl, self.omega_fr,
                         self.omega_rl, self.omega_rr])

    @staticmethod
    def from_array(a) -> "VehicleState":
        return VehicleState(*(float(v) for v in a))

    @staticmethod
    def rolling(v_x: float, params: "VehicleParams") -> "VehicleState":
        """State at speed v_x with all wheels in pure rolling."""
        w = v_x / params.wheel_radius
        return VehicleState(v_x=v_x, omega_fl=w, omega_fr=w,
                            omega_rl=w, omega_rr=w)


@dataclass(frozen=True)
class DriverInput:
    """Steering at the road wheels plus total drive/brake torques."""
    delta: float = 0.0       # rad
    tau_drive: float = 0.0   # N*m, split per axle by params.drive_front
    tau_brake: float = 0.0   # N*m, split per axle by params.brake_front

    def __post_init__(self):
        if abs(self.delta) > MAX_STEER:
            raise ValueError(f"steering {self.delta} outside +-{MAX_STEER} rad")
        if not (math.isfinite(self.tau_drive) and math.isfinite(self.tau_brake)):
            raise ValueError("torques must be finite")


@dataclass(frozen=True)
class SensorOutput:
    """10 sensor channels: 6-dof IMU plus 4 wheel encoders.

    Accelerometer in m/s^2, gyro in deg/s, encoders in rad/s. In this planar
    model a_z is the constant -g and the roll/pitch gyro channels read 0.
    """
    a_x: float
    a_y: float
    a_z: float
    omega_x_g: float
    omega_y_g: float
    omega_z_g: float
    omega_fl_e: float
    omega_fr_e: float
    omega_rl_e: float
    omega_rr_e: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a_x, self.a_y, self.a_z, self.omega_x_g,
                         self.omega_y_g, self.omega_z_g, self.omega_fl_e,
                         self.omega_fr_e, self.omega_rl_e, self.omega_rr_e])

    @staticmethod
    def from_array(a) -> "SensorOutput":
        return SensorOutput(*(float(v) for v in a))


@dataclass(frozen=True)
class VehicleParams:
    """Two-track model parameters. Defaults describe the nominal twin."""
    mass: float = 1500.0          # kg
    yaw_inertia: float = 2250.0   # kg*m^2
    a_front: float = 1.35         # CG -> front axle (m)
    b_rear: float = 1.45          # CG -> rear axle (m)
    half_track: float = 0.80      # m
    wheel_radius: float = 0.32    # m
    wheel_inertia: float = 2.0    # kg*m^2
    tire_b_front: float = 10.0
    tire_c_front: float = 1.55
    tire_d_front: float = 5200.0  # N per wheel
    tire_b_rear: float = 10.0
    tire_c_rear: float = 1.55
    tire_d_rear: float = 5800.0   # N per wheel
    drag_coeff: float = 0.43      # N/(m/s)^2
    roll_coeff: float = 0.012
    eps_v: float = 0.5            # m/s speed floor in slip denominators
    drive_front: float = 0.0      # drive torque fraction to front axle
    brake_front: float = 0.6      # brake torque fraction to front axle

    def __post_init__(self):
        positive = ("mass", "yaw_inertia", "a_front", "b_rear", "half_track",
                    "wheel_radius", "wheel_inertia", "tire_b_front",
                    "tire_c_front", "tire_d_front", "tire_b_rear",
                    "tire_c_rear", "tire_d_rear", "eps_v")
        for name in positive:
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.drag_coeff < 0.0 or self.roll_coeff < 0.0:
            raise ValueError("resistance coefficients must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([
            self.mass, self.yaw_inertia, self.a_front, self.b_rear,
            self.half_track, self.wheel_radius, self.wheel_inertia,
            self.tire_b_front, self.tire_c_front, self.tire_d_front,
            self.tire_b_rear, self.tire_c_rear, self.tire_d_rear,
            self.drag_coeff, self.roll_coeff, self.eps_v,
            self.drive_front, self.brake_front,
        ])

    def perturbed(self, mass_factor=1.0, tire_d_factor=1.0,
                  drag_factor=1.0, roll_factor=1.0) -> "VehicleParams":
        """Scaled copy; yaw inertia tracks the mass factor."""
        return replace(
            self,
            mass=self.mass * mass_factor,
            yaw_inertia=self.yaw_inertia * mass_factor,
            tire_d_front=self.tire_d_front * tire_d_factor,
            tire_d_rear=self.tire_d_rear * tire_d_factor,
            drag_coeff=self.drag_coeff * drag_factor,
            roll_coeff=self.roll_coeff * roll_factor,
        )


def mismatch_preset(params: VehicleParams | None = None) -> VehicleParams:
    """Default plant-vs-twin mismatch: mass +8%, tire peak -12%, drag +20%,
    rolling resistance +15%."""
    base = params if params is not None else VehicleParams()
    return base.perturbed(mass_factor=1.08, tire_d_factor=0.88,
                          drag_factor=1.20, roll_factor=1.15)


def twin_step(state: VehicleState, u: DriverInput, p: VehicleParams,
              dt: float) -> VehicleState | None:
    """One RK4 step of the two-track dynamics. This is the twin's f().

    Returns None (divergence marker) if the result is non-finite or the
    longitudinal speed exceeds the physical envelope.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    s = state.as_array()
    if not np.all(np.isfinite(s)):
        raise ValueError("state must be finite")
    out = _kernels.rk4_step(s, u.delta, u.tau_drive, u.tau_brake,
                            p.as_array(), dt)
    if not np.all(np.isfinite(out)) or abs(out[3]) > _kernels.VX_LIMIT:
        return None
    return VehicleState.from_array(out)


def twin_output(state: VehicleState, state_prev: VehicleState | None,
                u: DriverInput, p: VehicleParams,
                dt: float = 0.01) -> SensorOutput:
    """Noiseless sensor outputs at `state`. This is the twin's h().

    Accelerations come from the body-frame force balance, never from finite
    differencing; state_prev is accepted for signature parity with the
    prediction step and is not needed by this model.
    """
    s = state.as_array()
    out = np.empty(10)
    _kernels.sensor_outputs(s, u.delta, p.as_array(), out)
    return SensorOutput.from_array(out)

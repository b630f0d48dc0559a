"""Synthetic driving scenarios and dataset generation.

A scenario is a declarative recipe for steering and target-speed profiles.
The plant (perturbed two-track model) is driven through it by a simple
speed-tracking torque regulator, and the realized inputs, noisy sensor
readings and ground-truth states are recorded as a Dataset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _kernels
from .vehicle import VehicleParams, VehicleState, SENSOR_NAMES

DT = 0.01  # s; sensors sample at 100 Hz

CSV_COLUMNS = (
    "t", "delta", "tau_drive", "tau_brake",
    "a_x", "a_y", "a_z", "wx", "wy", "wz",
    "enc_fl", "enc_fr", "enc_rl", "enc_rr",
    "gt_x", "gt_y", "gt_psi", "gt_vx", "gt_vy", "gt_wz",
    "gt_wfl", "gt_wfr", "gt_wrl", "gt_wrr",
)

CSV_UNITS = {
    "t": "s", "delta": "rad", "tau_drive": "N*m", "tau_brake": "N*m",
    "a_x": "m/s^2", "a_y": "m/s^2", "a_z": "m/s^2",
    "wx": "deg/s", "wy": "deg/s", "wz": "deg/s",
    "enc_fl": "rad/s", "enc_fr": "rad/s", "enc_rl": "rad/s", "enc_rr": "rad/s",
    "gt_x": "m", "gt_y": "m", "gt_psi": "rad",
    "gt_vx": "m/s", "gt_vy": "m/s", "gt_wz": "rad/s",
    "gt_wfl": "rad/s", "gt_wfr": "rad/s", "gt_wrl": "rad/s", "gt_wrr": "rad/s",
}


class SimulationDivergence(RuntimeError):
    """Raised when a plant simulation leaves the physical envelope."""

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


@dataclass(frozen=True)
class NoiseSpec:
    """Per-channel Gaussian sensor noise standard deviations."""
    accel_std: float = 0.05       # m/s^2
    gyro_std_deg: float = 0.2     # deg/s
    encoder_std: float = 0.05     # rad/s

    def channel_stds(self) -> np.ndarray:
        a, g, e = self.accel_std, self.gyro_std_deg, self.encoder_std
        return np.array([a, a, a, g, g, g, e, e, e, e])

    @staticmethod
    def silent() -> "NoiseSpec":
        return NoiseSpec(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative input-profile recipe.

    steer_kind: none | slalom | corners | mixed. The steering amplitude is
    parametrized by a peak lateral-acceleration demand (m/s^2): the builder
    converts it to a road-wheel angle with the kinematic steering law at the
    current speed reference, the way a driver scales inputs with speed.

    speed_kind: hold | pulses.
    """
    name: str
    duration: float = 30.0
    steer_kind: str = "mixed"
    lat_accel: float = 6.0        # m/s^2 peak demand
    steer_period: float = 6.0     # s
    speed_kind: str = "pulses"
    speed_lo: float = 15.0        # m/s
    speed_hi: float = 28.0        # m/s
    speed_period: float = 10.0    # s
    v0: float = 20.0              # m/s, used by speed_kind == hold

    def __post_init__(self):
        if self.duration < 2 * DT:
            raise ValueError("scenario too short")
        if self.steer_kind not in ("none", "slalom", "corners", "mixed"):
            raise ValueError(f"unknown steer_kind {self.steer_kind!r}")
        if self.speed_kind not in ("hold", "pulses"):
            raise ValueError(f"unknown speed_kind {self.speed_kind!r}")


_WHEELBASE_NOM = 2.8   # m, driver's steering law; decoupled from plant params
_V_STEER_FLOOR = 8.0   # m/s


def build_profiles(spec: ScenarioSpec, dt: float = DT):
    """Sample the steering and speed-reference profiles on the time grid."""
    n = int(round(spec.duration / dt)) + 1
    t = np.arange(n) * dt
    ramp = np.clip(t / 2.0, 0.0, 1.0)  # ease inputs in over the first 2 s

    if spec.speed_kind == "hold":
        v_ref = np.full(n, float(spec.v0))
    else:
        mid = 0.5 * (spec.speed_hi + spec.speed_lo)
        half = 0.5 * (spec.speed_hi - spec.speed_lo)
        wv = 2.0 * math.pi / spec.speed_period
        v_ref = mid + half * np.tanh(2.0 * np.sin(wv * t + 0.4))

    w = 2.0 * math.pi / spec.steer_period
    if spec.steer_kind == "none":
        shape = np.zeros(n)
    elif spec.steer_kind == "slalom":
        shape = np.sin(w * t)
    elif spec.steer_kind == "corners":
        shape = np.tanh(2.5 * np.sin(w * t))
    else:  # mixed: smoothed corners with a faster slalom overlay
        shape = (0.7 * np.tanh(2.5 * np.sin(w * t))
                 + 0.3 * np.sin(2.7 * w * t + 0.9))
    amp = spec.lat_accel * _WHEELBASE_NOM / np.maximum(v_ref, _V_STEER_FLOOR) ** 2
    delta = np.clip(shape * amp * ramp, -0.55, 0.55)
    return t, delta, v_ref


# Preset suite: one aggressive tuning scenario plus validations A-E spanning
# mild, longitudinal-only, harsher-than-tuning and lateral-heavy driving.
SCENARIOS = {
    "optimization": ScenarioSpec(
        "optimization", duration=30.0, steer_kind="mixed", lat_accel=8.0,
        steer_period=6.0, speed_kind="pulses", speed_lo=14.0, speed_hi=30.0,
        speed_period=10.0),
    "val_a": ScenarioSpec(
        "val_a", duration=28.0, steer_kind="mixed", lat_accel=7.0,
        steer_period=7.0, speed_kind="pulses", speed_lo=16.0, speed_hi=28.0,
        speed_period=9.0),
    "val_b": ScenarioSpec(
        "val_b", duration=26.0, steer_kind="slalom", lat_accel=3.5,
        steer_period=8.0, speed_kind="pulses", speed_lo=18.0, speed_hi=22.0,
        speed_period=12.0),
    "val_c": ScenarioSpec(
        "val_c", duration=26.0, steer_kind="none", speed_kind="pulses",
        speed_lo=12.0, speed_hi=30.0, speed_period=8.0),
    "val_d": ScenarioSpec(
        "val_d", duration=28.0, steer_kind="mixed", lat_accel=8.8,
        steer_period=5.5, speed_kind="pulses", speed_lo=13.0, speed_hi=30.0,
        speed_period=8.0),
    "val_e": ScenarioSpec(
        "val_e", duration=26.0, steer_kind="slalom", lat_accel=7.5,
        steer_period=4.0, speed_kind="hold", v0=24.0),
}


def scenario_preset(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; "
                       f"presets: {sorted(SCENARIOS)}") from None


def scenario_from_dict(d: dict) -> ScenarioSpec:
    """Build a spec from a TOML table; unknown keys rejected."""
    return ScenarioSpec(**d)


@dataclass
class Dataset:
    """Time series of inputs, measurements and ground-truth states."""
    dt: float
    t: np.ndarray       # (n,)
    u: np.ndarray       # (n, 3): delta, tau_drive, tau_brake
    y_meas: np.ndarray  # (n, 10) sensor channels
    x_meas: np.ndarray  # (n, 10) ground-truth states
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        if n < 2:
            raise ValueError("dataset needs at least 2 samples")
        for name in ("u", "y_meas", "x_meas"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != t length")
        if abs(self.dt - DT) > 1e-12:
            raise ValueError(f"sample period must be {DT} s")

    def __len__(self):
        return len(self.t)

    def save(self, path) -> None:
        """Write <path>.csv plus a <path>.json units/metadata sidecar."""
        path = Path(path)
        rows = np.column_stack([self.t, self.u, self.y_meas, self.x_meas])
        with open(path.with_suffix(".csv"), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(CSV_COLUMNS)
            for row in rows:
                wr.writerow([repr(float(v)) for v in row])
        meta = dict(self.meta)
        meta.update({"label": self.label, "dt": self.dt, "n": len(self),
                     "units": CSV_UNITS})
        with open(path.with_suffix(".json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "Dataset":
        path = Path(path)
        data = np.genfromtxt(path.with_suffix(".csv"), delimiter=",",
                             skip_header=1)
        if data.ndim == 1:
            data = data[None, :]
        if data.shape[1] != len(CSV_COLUMNS):
            raise ValueError(f"expected {len(CSV_COLUMNS)} columns, "
                             f"got {data.shape[1]}")
        with open(path.with_suffix(".json")) as f:
            meta = json.load(f)
        dt = float(meta.get("dt", DT))
        label = meta.pop("label", "")
        meta.pop("units", None)
        return Dataset(dt=dt, t=data[:, 0], u=data[:, 1:4],
                       y_meas=data[:, 4:14], x_meas=data[:, 14:24],
                       label=label, meta=meta)


def _traction_budget(plant: VehicleParams, delta: np.ndarray,
                     v_ref: np.ndarray):
    """Friction-circle acceleration caps for the torque regulator.

    A driver (or traction control) cannot demand more longitudinal force than
    the tires can pass: the drive cap comes from the driven-axle peak force,
    the brake cap from all four wheels, both shrunk while the steering
    profile is simultaneously demanding lateral acceleration.
    """
    m = plant.mass
    front_peak = 2.0 * plant.tire_d_front
    rear_peak = 2.0 * plant.tire_d_rear
    drive_axle = (plant.drive_front * front_peak
                  + (1.0 - plant.drive_front) * rear_peak)
    drive_cap = 0.70 * drive_axle / m
    brake_cap = 0.70 * (front_peak + rear_peak) / m
    ay_cap = 0.95 * (front_peak + rear_peak) / m
    ay_dem = np.abs(delta) * np.maximum(v_ref, _V_STEER_FLOOR) ** 2 / _WHEELBASE_NOM
    circle = np.sqrt(1.0 - np.minimum(ay_dem / ay_cap, 0.95) ** 2)
    return drive_cap * circle, brake_cap * circle


def generate_dataset(scenario: ScenarioSpec, plant_params: VehicleParams,
                     noise_seed: int, noise: NoiseSpec = NoiseSpec(),
                     kv: float = 2.0) -> Dataset:
    """Simulate the plant through the scenario and record a Dataset.

    The torque regulator tracks the scenario speed profile with acceleration
    demand kv*(v_ref - v_x) clipped to the traction budget. Reproducible per
    noise_seed.
    """
    t, delta, v_ref = build_profiles(scenario)
    n = len(t)
    p = plant_params.as_array()
    x0 = VehicleState.rolling(float(v_ref[0]), plant_params).as_array()
    a_drive, a_brake = _traction_budget(plant_params, delta, v_ref)

    traj = np.empty((n, 10))
    u_out = np.empty((n, 3))
    y_out = np.empty((n, 10))
    n_valid, ok = _kernels.plant_pass(x0, delta, v_ref, p, DT, kv,
                                      a_drive, a_brake, traj, u_out, y_out)
    if not ok:
        raise SimulationDivergence(
            f"plant diverged at sample {n_valid} (t={n_valid * DT:.2f} s) "
            f"in scenario {scenario.name!r}", sample=int(n_valid))

    rng = np.random.default_rng(noise_seed)
    y_noisy = y_out + rng.normal(0.0, 1.0, size=y_out.shape) * noise.channel_stds()

    meta = {"scenario": asdict(scenario), "noise_seed": int(noise_seed),
            "noise": asdict(noise),
            "plant_params": asdict(plant_params)}
    return Dataset(dt=DT, t=t, u=u_out, y_meas=y_noisy, x_meas=traj,
                   label=scenario.name, meta=meta)

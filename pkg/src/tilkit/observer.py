"""Twin-in-the-loop correction loop.

The twin predicts one step ahead; a constant gain matrix maps the sensor
output error to additive corrections of four states (v_x, omega_z, front-left
and rear-right wheel speeds) from three measured outputs (yaw-rate gyro and
the two matching wheel encoders). An optional linear feature-extraction map
lets a reduced-input gain consume projected output errors instead.

Gain entries carry the mixed units of the loss: corrections to v_x are in
km/h per unit output error and corrections to omega_z in deg/s, so the tuning
ranges and normalized magnitudes are directly comparable across entries.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .scenarios import Dataset
from .vehicle import (KMH, RAD2DEG, SENSOR_NAMES, DriverInput, SensorOutput,
                      VehicleParams, VehicleState, twin_output, twin_step)

STATE_ROWS = ("vx", "wz", "wfl", "wrr")
OUTPUT_COLS = ("wz", "enc_fl", "enc_rr")

# indices into the 10-entry state / sensor vectors
_ROW_STATE_IDX = (3, 5, 6, 9)
_COL_CHANNEL_IDX = tuple(SENSOR_NAMES.index(c) for c in ("wz", "enc_fl", "enc_rr"))

# gain-unit corrections -> physical state units (km/h -> m/s, deg/s -> rad/s)
_ROW_UNIT = np.array([1.0 / KMH, math.pi / 180.0, 1.0, 1.0])

INFEASIBLE = float("inf")

# Tuning ranges for the 12 case-study gains (columns wz, enc_fl, enc_rr).
# Auto-correlated entries are (0, 1.5), cross-wheel entries (-0.75, 0.75),
# wheel-speed-to-vx entries nonnegative; the rest from the data-range
# heuristic on the reference vehicle.
DEFAULT_BOUNDS = np.array([
    [[-1.5, 1.5], [0.0, 0.45], [0.0, 0.45]],    # vx
    [[0.0, 1.5], [-0.06, 0.06], [-0.06, 0.06]],  # wz
    [[-1.5, 1.5], [0.0, 1.5], [-0.75, 0.75]],    # wfl
    [[-1.5, 1.5], [-0.75, 0.75], [0.0, 1.5]],    # wrr
])


def entry_label(row: int, col: int, cols=OUTPUT_COLS) -> str:
    return f"{cols[col]}->{STATE_ROWS[row]}"


def _check_bounds(bounds, shape):
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != shape + (2,):
        raise ValueError(f"bounds shape {bounds.shape} != {shape + (2,)}")
    if np.any(bounds[..., 0] > 0.0) or np.any(bounds[..., 1] < 0.0):
        raise ValueError("bounds must satisfy lower <= 0 <= upper")
    return bounds


@dataclass(frozen=True)
class GainMatrix:
    """Constant correction matrix with sparsity mask and per-entry ranges."""
    entries: np.ndarray
    mask: np.ndarray = None
    bounds: np.ndarray = None

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.shape != (4, 3):
            raise ValueError("gain matrix must be 4x3")
        mask = self.mask
        mask = np.ones((4, 3), bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (4, 3):
            raise ValueError("mask must be 4x3")
        bounds = DEFAULT_BOUNDS if self.bounds is None else self.bounds
        bounds = _check_bounds(bounds, (4, 3))
        if np.any(entries[~mask] != 0.0):
            raise ValueError("masked-out entries must be exactly zero")
        lo, hi = bounds[..., 0], bounds[..., 1]
        bad = mask & ((entries < lo) | (entries > hi))
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"entry {entry_label(i, j)}={entries[i, j]} "
                             f"outside [{lo[i, j]}, {hi[i, j]}]")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "bounds", bounds)

    @staticmethod
    def zeros(mask=None, bounds=None) -> "GainMatrix":
        return GainMatrix(np.zeros((4, 3)), mask=mask, bounds=bounds)

    @staticmethod
    def from_vector(vec, mask=None, bounds=None) -> "GainMatrix":
        mask = np.ones((4, 3), bool) if mask is None else np.asarray(mask, bool)
        vec = np.asarray(vec, dtype=float)
        if vec.size != int(mask.sum()):
            raise ValueError(f"vector length {vec.size} != active count "
                             f"{int(mask.sum())}")
        entries = np.zeros((4, 3))
        entries[mask] = vec
        return GainMatrix(entries, mask=mask, bounds=bounds)

    def to_vector(self) -> np.ndarray:
        """Active entries, row-major."""
        return self.entries[self.mask].copy()

    def active_bounds(self) -> np.ndarray:
        """(n_active, 2) bounds for the active entries, row-major."""
        return self.bounds[self.mask].copy()

    def labels(self) -> list:
        return [entry_label(i, j) for i in range(4) for j in range(3)
                if self.mask[i, j]]


@dataclass(frozen=True)
class ReducedGain:
    """Reduced-input gain: corrections are entries @ (reduction error map).

    reduction must expose error_map() -> (n_red, n_channels) and a channels
    tuple naming the raw sensor channels it consumes.
    """
    entries: np.ndarray
    reduction: object
    bounds: np.ndarray = None

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        n_red, n_full = self.reduction.error_map().shape
        if n_red >= n_full:
            raise ValueError("reduction must lower the output dimension")
        if entries.shape != (4, n_red):
            raise ValueError(f"entries must be 4x{n_red}")
        if self.bounds is not None:
            _check_bounds(self.bounds, entries.shape)
            object.__setattr__(self, "bounds",
                               np.asarray(self.bounds, dtype=float))
        object.__setattr__(self, "entries", entries)

    def to_vector(self) -> np.ndarray:
        return self.entries.ravel().copy()

    def labels(self) -> list:
        return [f"pc{c + 1}->{STATE_ROWS[i]}"
                for i in range(4) for c in range(self.entries.shape[1])]


def effective_gain(gain) -> np.ndarray:
    """(4, 10) matrix taking the raw sensor error to state corrections."""
    if isinstance(gain, GainMatrix):
        sel = np.zeros((3, 10))
        for r, c in enumerate(_COL_CHANNEL_IDX):
            sel[r, c] = 1.0
        core = gain.entries @ sel
    elif isinstance(gain, ReducedGain):
        tmap = gain.reduction.error_map()
        idx = [SENSOR_NAMES.index(c) for c in gain.reduction.channels]
        sel = np.zeros((tmap.shape[1], 10))
        for r, c in enumerate(idx):
            sel[r, c] = 1.0
        core = gain.entries @ tmap @ sel
    else:
        raise TypeError(f"unsupported gain type {type(gain).__name__}")
    return _ROW_UNIT[:, None] * core


def observer_step(x_hat_prev: VehicleState, u: DriverInput, y: SensorOutput,
                  K, params: VehicleParams = VehicleParams(),
                  dt: float = 0.01) -> VehicleState | None:
    """One predict+correct step: x_hat = f(x_prev, u) + K (y - h(x_prev, u)).

    Only the four correctable states receive a direct correction; everything
    else evolves open loop. Returns None if the twin diverged.
    """
    y_pred = twin_output(x_hat_prev, None, u, params, dt)
    x_pred = twin_step(x_hat_prev, u, params, dt)
    if x_pred is None:
        return None
    G = effective_gain(K)
    corr = G @ (y.as_array() - y_pred.as_array())
    s = x_pred.as_array()
    s[list(_ROW_STATE_IDX)] += corr
    if not np.all(np.isfinite(s)):
        return None
    return VehicleState.from_array(s)


@dataclass
class ObserverRun:
    """Result of one closed-loop pass over a dataset."""
    x_est: np.ndarray          # (n, 10) estimated trajectory
    rmse_vx: float             # km/h
    rmse_wz: float             # deg/s
    rmse_beta: float           # deg, diagnostic only
    stable: bool
    wall_time: float           # s
    n_valid: int = 0
    label: str = ""

    def summary(self) -> dict:
        return {"rmse_vx": self.rmse_vx, "rmse_wz": self.rmse_wz,
                "rmse_beta": self.rmse_beta, "stable": self.stable,
                "wall_time": self.wall_time}


def sideslip(state: VehicleState, eps_v: float = 0.5) -> float:
    """Lateral sideslip beta = atan(v_y / v_x) in degrees.

    Below the speed floor the angle is ill-defined and 0 is returned.
    """
    if abs(state.v_x) <= eps_v:
        return 0.0
    return math.degrees(math.atan(state.v_y / state.v_x))


def _beta_series(states: np.ndarray, eps_v: float = 0.5):
    """Vectorized sideslip (deg) plus validity mask for a state trajectory."""
    vx = states[:, 3]
    valid = np.abs(vx) > eps_v
    beta = np.zeros(len(states))
    beta[valid] = np.degrees(np.arctan(states[valid, 4] / vx[valid]))
    return beta, valid


def default_initial_state(data: Dataset, vx_offset: float = 2.0) -> VehicleState:
    """Ground-truth initial state with the configured v_x offset applied."""
    s = data.x_meas[0].copy()
    s[3] += vx_offset
    return VehicleState.from_array(s)


def run_observer(data: Dataset, gain, x0: VehicleState | None = None,
                 params: VehicleParams = VehicleParams(),
                 vx_offset: float = 2.0) -> ObserverRun:
    """Full closed-loop pass; losses in km/h and deg/s per the rms cost.

    The run is flagged unstable (losses = inf) as soon as any state leaves
    the divergence envelope or turns non-finite.
    """
    t0 = time.perf_counter()
    if x0 is None:
        x0 = default_initial_state(data, vx_offset)
    G = effective_gain(gain)
    n = len(data)
    traj = np.zeros((n, 10))
    n_valid, stable = _kernels.observer_pass(
        x0.as_array(), data.u, data.y_meas, G, params.as_array(), data.dt, traj)
    wall = time.perf_counter() - t0

    if not stable:
        return ObserverRun(traj[:n_valid], INFEASIBLE, INFEASIBLE, INFEASIBLE,
                           False, wall, n_valid=int(n_valid), label=data.label)

    est = traj[1:]
    gt = data.x_meas[1:]
    rmse_vx = float(np.sqrt(np.mean((gt[:, 3] - est[:, 3]) ** 2))) * KMH
    rmse_wz = float(np.sqrt(np.mean((gt[:, 5] - est[:, 5]) ** 2))) * RAD2DEG
    beta_est, ok_est = _beta_series(est)
    beta_gt, ok_gt = _beta_series(gt)
    ok = ok_est & ok_gt
    rmse_beta = float(np.sqrt(np.mean((beta_gt[ok] - beta_est[ok]) ** 2))) \
        if np.any(ok) else 0.0
    return ObserverRun(traj, rmse_vx, rmse_wz, rmse_beta, True, wall,
                       n_valid=int(n_valid), label=data.label)


def evaluate_loss(run: ObserverRun) -> float:
    """rms(v_x) [km/h] + rms(omega_z) [deg/s]; inf sentinel when unstable."""
    if not run.stable:
        return INFEASIBLE
    return run.rmse_vx + run.rmse_wz


def scalar_observer_errors(k: float, steps: int = 300,
                           x_hat0: float = 0.0, x_true: float = 1.0,
                           drift: np.ndarray | None = None) -> np.ndarray:
    """Estimation-error sequence of the scalar slow-state surrogate.

    For a state that changes negligibly between samples the correction loop
    collapses to x_hat(t) = x_hat(t-1) + k*(x(t) - x_hat(t-1)), which is
    asymptotically stable exactly for k in (0, 2).
    """
    x = x_true
    x_hat = x_hat0
    errs = np.empty(steps + 1)
    errs[0] = x - x_hat
    for t in range(1, steps + 1):
        if drift is not None:
            x += drift[t - 1]
        x_hat = x_hat + k * (x - x_hat)
        errs[t] = x - x_hat
    return errs


def export_run(run: ObserverRun, data: Dataset, path) -> None:
    """Write estimated-vs-truth CSV and a JSON loss summary."""
    path = Path(path)
    n = len(run.x_est)
    with open(path.with_suffix(".csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["t", "vx_est", "vx_gt", "wz_est", "wz_gt",
                     "beta_est", "beta_gt"])
        beta_est, _ = _beta_series(run.x_est)
        beta_gt, _ = _beta_series(data.x_meas[:n])
        for i in range(n):
            wr.writerow([repr(float(v)) for v in (
                data.t[i], run.x_est[i, 3], data.x_meas[i, 3],
                run.x_est[i, 5], data.x_meas[i, 5], beta_est[i], beta_gt[i])])
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(run.summary(), f, indent=2, sort_keys=True)
        f.write("\n")

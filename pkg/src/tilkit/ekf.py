"""Benchmark estimator: extended Kalman filter on a dynamic single-track model.

State [v_x, v_y, omega_z, F_x, F_yf, F_yr]: bicycle kinetics with the tire
forces carried as first-order random walks driven by the process noise.
Measurements [a_x, a_y, omega_z, v_x], the speed pseudo-measurement taken as
wheel radius times the mean rear encoder speed. Q and R diagonals are tuned
in log space by the same constrained optimizer as the observer gains.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .bo import OptimizationProblem, run_parallel_bo
from .observer import INFEASIBLE, ObserverRun
from .scenarios import Dataset
from .tuning import TuningBudget
from .vehicle import KMH, RAD2DEG, VehicleParams

STATE_NAMES = ("v_x", "v_y", "omega_z", "F_x", "F_yf", "F_yr")

# physically motivated starting diagonals: velocities follow the kinetics
# closely, force random walks absorb hundreds of N per step
DEFAULT_Q = np.array([1e-4, 1e-4, 1e-6, 4e4, 4e4, 4e4])
DEFAULT_R = np.array([2.5e-3, 2.5e-3, 1.2e-5, 1e-2])
DEFAULT_P0 = np.array([1.0, 1.0, 0.1, 4e6, 4e6, 4e6])


@dataclass(frozen=True)
class EkfConfig:
    """Identified vehicle parameters plus noise covariances (diagonals)."""
    mass: float = 1500.0
    yaw_inertia: float = 2250.0
    a_front: float = 1.35
    b_rear: float = 1.45
    drag_coeff: float = 0.43
    roll_coeff: float = 0.012
    wheel_radius: float = 0.32
    eps_v: float = 0.5
    q_diag: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    r_diag: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    p0_diag: np.ndarray = field(default_factory=lambda: DEFAULT_P0.copy())

    def __post_init__(self):
        q = np.asarray(self.q_diag, dtype=float)
        r = np.asarray(self.r_diag, dtype=float)
        p0 = np.asarray(self.p0_diag, dtype=float)
        if q.shape != (6,) or np.any(q <= 0.0):
            raise ValueError("q_diag must be 6 strictly positive entries")
        if r.shape != (4,) or np.any(r <= 0.0):
            raise ValueError("r_diag must be 4 strictly positive entries")
        if p0.shape != (6,) or np.any(p0 < 0.0):
            raise ValueError("p0_diag must be 6 nonnegative entries")
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "r_diag", r)
        object.__setattr__(self, "p0_diag", p0)

    @staticmethod
    def from_vehicle(params: VehicleParams, **kw) -> "EkfConfig":
        return EkfConfig(mass=params.mass, yaw_inertia=params.yaw_inertia,
                         a_front=params.a_front, b_rear=params.b_rear,
                         drag_coeff=params.drag_coeff,
                         roll_coeff=params.roll_coeff,
                         wheel_radius=params.wheel_radius,
                         eps_v=params.eps_v, **kw)

    def model_array(self) -> np.ndarray:
        return np.array([self.mass, self.yaw_inertia, self.a_front,
                         self.b_rear, self.drag_coeff, self.roll_coeff,
                         self.eps_v])


def ekf_step(state, cov, config: EkfConfig, u_delta: float, y,
             dt: float = 0.01):
    """One predict+update with analytic Jacobians and Joseph-form covariance.

    y = [a_x, a_y, omega_z (rad/s), v_x (m/s)]. Returns (state, cov, ok);
    ok=False flags a divergent or non-finite update.
    """
    x = np.asarray(state, dtype=float)
    P = np.asarray(cov, dtype=float)
    z = np.asarray(y, dtype=float)
    xn, Pn, ok = _kernels.ekf_step_core(x, P, float(u_delta), z,
                                        config.model_array(),
                                        config.q_diag, config.r_diag, dt)
    return xn, Pn, bool(ok)


def measurements_from_dataset(data: Dataset, config: EkfConfig) -> np.ndarray:
    """(n, 4) EKF measurement rows from the recorded sensor channels."""
    z = np.empty((len(data), 4))
    z[:, 0] = data.y_meas[:, 0]
    z[:, 1] = data.y_meas[:, 1]
    z[:, 2] = data.y_meas[:, 5] / RAD2DEG
    z[:, 3] = config.wheel_radius * 0.5 * (data.y_meas[:, 8]
                                           + data.y_meas[:, 9])
    return z


def run_ekf(data: Dataset, config: EkfConfig,
            x0: np.ndarray | None = None) -> ObserverRun:
    """Filter a whole dataset; losses in the same units as the observer runs."""
    t0 = time.perf_counter()
    z = measurements_from_dataset(data, config)
    if x0 is None:
        x0 = np.array([z[0, 3], 0.0, z[0, 2], 0.0, 0.0, 0.0])
    P0 = np.diag(config.p0_diag)
    n = len(data)
    traj = np.zeros((n, 6))
    n_valid, stable = _kernels.ekf_pass(np.asarray(x0, dtype=float), P0,
                                        data.u[:, 0].copy(), z,
                                        config.model_array(), config.q_diag,
                                        config.r_diag, data.dt, traj)
    wall = time.perf_counter() - t0
    if not stable:
        return ObserverRun(traj[:n_valid], INFEASIBLE, INFEASIBLE, INFEASIBLE,
                           False, wall, n_valid=int(n_valid), label=data.label)

    est = traj[1:]
    gt = data.x_meas[1:]
    rmse_vx = float(np.sqrt(np.mean((gt[:, 3] - est[:, 0]) ** 2))) * KMH
    rmse_wz = float(np.sqrt(np.mean((gt[:, 5] - est[:, 2]) ** 2))) * RAD2DEG
    ok = (np.abs(gt[:, 3]) > config.eps_v) & (np.abs(est[:, 0]) > config.eps_v)
    beta_gt = np.degrees(np.arctan(gt[ok, 4] / gt[ok, 3]))
    beta_est = np.degrees(np.arctan(est[ok, 1] / est[ok, 0]))
    rmse_beta = float(np.sqrt(np.mean((beta_gt - beta_est) ** 2))) \
        if np.any(ok) else 0.0
    return ObserverRun(traj, rmse_vx, rmse_wz, rmse_beta, True, wall,
                       n_valid=int(n_valid), label=data.label)


def ekf_loss(run: ObserverRun) -> float:
    """Tuning cost: rms(v_x) [km/h] + rms(beta) [deg] + rms(omega_z) [deg/s]."""
    if not run.stable:
        return INFEASIBLE
    return run.rmse_vx + run.rmse_beta + run.rmse_wz


def tune_qr(data: Dataset, budget: TuningBudget,
            base: EkfConfig | None = None, decades: float = 4.0,
            scheduler: str = "virtual"):
    """Optimize the Q/R diagonals in log10 space around the defaults.

    10 variables (6 process + 4 measurement), bounds +-`decades` around the
    physically motivated starting diagonals; stability is the coupled
    constraint. Returns (EkfConfig, BoResult).
    """
    if budget.n_total < 50:
        raise ValueError("Q/R tuning needs a budget of at least 50")
    base = base or EkfConfig()
    center = np.log10(np.concatenate([base.q_diag, base.r_diag]))
    bounds = np.stack([center - decades, center + decades], axis=1)

    cache = {}

    def config_of(vec):
        v = 10.0 ** np.asarray(vec, dtype=float)
        return EkfConfig(mass=base.mass, yaw_inertia=base.yaw_inertia,
                         a_front=base.a_front, b_rear=base.b_rear,
                         drag_coeff=base.drag_coeff, roll_coeff=base.roll_coeff,
                         wheel_radius=base.wheel_radius, eps_v=base.eps_v,
                         q_diag=v[:6], r_diag=v[6:], p0_diag=base.p0_diag)

    def run_at(vec):
        key = np.asarray(vec, dtype=float).tobytes()
        if key not in cache:
            cache[key] = run_ekf(data, config_of(vec))
        return cache[key]

    # the untuned diagonals are always evaluated, so tuning can only improve
    problem = OptimizationProblem(
        bounds=bounds, objective=lambda v: ekf_loss(run_at(v)),
        constraints=[lambda v: run_at(v).stable],
        n_total=budget.n_total, n_seed=budget.n_seed,
        workers=budget.workers, seed=budget.seed,
        initial_points=[center])
    result = run_parallel_bo(problem, scheduler=scheduler)
    return config_of(result.best_point), result

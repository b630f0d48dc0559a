"""Compiled numerical kernels: two-track dynamics, observer/plant passes, EKF pass.

Everything here operates on flat float64 arrays so the hot loops can be JIT
compiled. The public, dataclass-based API lives in vehicle.py / observer.py /
ekf.py; those modules are the only intended callers.

State vector layout (10 entries):
    0 x      global position (m)
    1 y      global position (m)
    2 psi    heading (rad)
    3 vx     body longitudinal velocity (m/s)
    4 vy     body lateral velocity (m/s)
    5 wz     yaw rate (rad/s)
    6 wfl    front-left wheel speed (rad/s)
    7 wfr    front-right wheel speed (rad/s)
    8 wrl    rear-left wheel speed (rad/s)
    9 wrr    rear-right wheel speed (rad/s)

Sensor vector layout (10 channels):
    0 a_x, 1 a_y, 2 a_z (m/s^2); 3 wx, 4 wy, 5 wz gyro (deg/s);
    6..9 wheel encoders fl, fr, rl, rr (rad/s)

Parameter vector layout (18 entries): see vehicle.VehicleParams.as_array.
"""

import math

import numpy as np

try:
    from numba import njit

    def _jit(func):
        return njit(cache=True)(func)

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    def _jit(func):
        return func

    HAVE_NUMBA = False

GRAVITY = 9.80665
RAD2DEG = 180.0 / math.pi

# divergence thresholds (generously above any physical scenario)
VX_LIMIT = 200.0      # m/s
WZ_LIMIT = 20.0       # rad/s
WHEEL_LIMIT = 500.0   # rad/s

# wheel positions are (+a, +-w) front and (-b, +-w) rear; left side is +y
_BRAKE_SMOOTH = 0.5   # rad/s, tanh scale opposing wheel rotation


@_jit
def _wheel_force(vcx, vcy, ww, steer, rw, B, C, D, eps_v):
    """Tire forces for one wheel: friction-circle-coupled magic formula.

    Returns (fbx, fby, fx_wheel): body-frame force components and the
    longitudinal force in the wheel frame (for spin dynamics).
    """
    cd = math.cos(steer)
    sd = math.sin(steer)
    vl = cd * vcx + sd * vcy
    vt = -sd * vcx + cd * vcy

    den = abs(vl)
    if den < eps_v:
        den = eps_v
    kappa = (ww * rw - vl) / den
    alpha = math.atan(vt / den)

    fx0 = D * math.sin(C * math.atan(B * kappa))
    fy0 = -D * math.sin(C * math.atan(B * alpha))
    fn = math.sqrt(fx0 * fx0 + fy0 * fy0)
    if fn > D:
        scale = D / fn
        fx0 *= scale
        fy0 *= scale

    fbx = cd * fx0 - sd * fy0
    fby = sd * fx0 + cd * fy0
    return fbx, fby, fx0


@_jit
def _forces(s, delta, p):
    """Aggregate body forces/yaw moment and per-wheel longitudinal forces.

    Returns (fx_tot, fy_tot, mz_tot, fxw0..fxw3) with aero drag and rolling
    resistance already folded into fx_tot.
    """
    vx = s[3]
    vy = s[4]
    wz = s[5]
    m = p[0]
    a = p[2]
    b = p[3]
    w = p[4]
    rw = p[5]
    eps_v = p[15]

    fx_tot = 0.0
    fy_tot = 0.0
    mz_tot = 0.0
    fxw = np.empty(4)
    for i in range(4):
        if i == 0:
            px = a; py = w; steer = delta; ww = s[6]
            B = p[7]; C = p[8]; D = p[9]
        elif i == 1:
            px = a; py = -w; steer = delta; ww = s[7]
            B = p[7]; C = p[8]; D = p[9]
        elif i == 2:
            px = -b; py = w; steer = 0.0; ww = s[8]
            B = p[10]; C = p[11]; D = p[12]
        else:
            px = -b; py = -w; steer = 0.0; ww = s[9]
            B = p[10]; C = p[11]; D = p[12]

        vcx = vx - wz * py
        vcy = vy + wz * px
        fbx, fby, fx_wheel = _wheel_force(vcx, vcy, ww, steer, rw, B, C, D, eps_v)
        fx_tot += fbx
        fy_tot += fby
        mz_tot += px * fby - py * fbx
        fxw[i] = fx_wheel

    drag = p[13] * vx * abs(vx)
    roll = p[14] * m * GRAVITY * math.tanh(vx / eps_v)
    fx_tot -= drag + roll
    return fx_tot, fy_tot, mz_tot, fxw[0], fxw[1], fxw[2], fxw[3]


@_jit
def _deriv(s, delta, tau_drive, tau_brake, p, ds):
    """Time derivative of the 10-entry state."""
    m = p[0]
    iz = p[1]
    rw = p[5]
    iw = p[6]

    fx_tot, fy_tot, mz_tot, f0, f1, f2, f3 = _forces(s, delta, p)

    vx = s[3]
    vy = s[4]
    wz = s[5]
    psi = s[2]
    cpsi = math.cos(psi)
    spsi = math.sin(psi)

    ds[0] = vx * cpsi - vy * spsi
    ds[1] = vx * spsi + vy * cpsi
    ds[2] = wz
    ds[3] = fx_tot / m + wz * vy
    ds[4] = fy_tot / m - wz * vx
    ds[5] = mz_tot / iz

    # drive torque split per axle, then equally per wheel; brake opposes spin
    td_f = 0.5 * tau_drive * p[16]
    td_r = 0.5 * tau_drive * (1.0 - p[16])
    tb_f = 0.5 * tau_brake * p[17]
    tb_r = 0.5 * tau_brake * (1.0 - p[17])
    ds[6] = (td_f - tb_f * math.tanh(s[6] / _BRAKE_SMOOTH) - f0 * rw) / iw
    ds[7] = (td_f - tb_f * math.tanh(s[7] / _BRAKE_SMOOTH) - f1 * rw) / iw
    ds[8] = (td_r - tb_r * math.tanh(s[8] / _BRAKE_SMOOTH) - f2 * rw) / iw
    ds[9] = (td_r - tb_r * math.tanh(s[9] / _BRAKE_SMOOTH) - f3 * rw) / iw


# The wheel-spin mode has a time constant of a few ms at scenario speeds
# (tire slip stiffness x r_w^2 / (I_w v)), beyond explicit RK4's stability
# region at the 10 ms sample period; the sample step is therefore split into
# internal substeps while inputs and corrections stay at the sample cadence.
N_SUBSTEPS = 4


@_jit
def rk4_step(s, delta, tau_drive, tau_brake, p, dt):
    """One sample step: explicit RK4 with internal substeps; inputs held."""
    k1 = np.empty(10)
    k2 = np.empty(10)
    k3 = np.empty(10)
    k4 = np.empty(10)
    tmp = np.empty(10)
    out = s.copy()
    h = dt / N_SUBSTEPS

    for _ in range(N_SUBSTEPS):
        _deriv(out, delta, tau_drive, tau_brake, p, k1)
        for i in range(10):
            tmp[i] = out[i] + 0.5 * h * k1[i]
        _deriv(tmp, delta, tau_drive, tau_brake, p, k2)
        for i in range(10):
            tmp[i] = out[i] + 0.5 * h * k2[i]
        _deriv(tmp, delta, tau_drive, tau_brake, p, k3)
        for i in range(10):
            tmp[i] = out[i] + h * k3[i]
        _deriv(tmp, delta, tau_drive, tau_brake, p, k4)
        for i in range(10):
            out[i] = out[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i]
                                         + k4[i])
    return out


@_jit
def sensor_outputs(s, delta, p, out):
    """Noiseless sensor channels from the body-frame force balance at s."""
    m = p[0]
    fx_tot, fy_tot, _, _, _, _, _ = _forces(s, delta, p)
    out[0] = fx_tot / m
    out[1] = fy_tot / m
    out[2] = -GRAVITY
    out[3] = 0.0
    out[4] = 0.0
    out[5] = s[5] * RAD2DEG
    out[6] = s[6]
    out[7] = s[7]
    out[8] = s[8]
    out[9] = s[9]


@_jit
def _state_bad(s):
    for i in range(10):
        if not math.isfinite(s[i]):
            return True
    if abs(s[3]) > VX_LIMIT:
        return True
    if abs(s[5]) > WZ_LIMIT:
        return True
    for i in range(6, 10):
        if abs(s[i]) > WHEEL_LIMIT:
            return True
    return False


@_jit
def observer_pass(x0, u, y_meas, gain, p, dt, traj):
    """Closed-loop observer sweep over a whole dataset.

    u: (n, 3) driver inputs [delta, tau_drive, tau_brake]
    y_meas: (n, 10) measured sensor channels
    gain: (4, 10) effective correction matrix mapping raw output error to
          physical-unit corrections of states (vx, wz, wfl, wrr)
    traj: (n, 10) output buffer for the corrected estimates

    Returns (n_valid, stable): n_valid = index of first divergent sample or n.
    """
    n = u.shape[0]
    s = x0.copy()
    for j in range(10):
        traj[0, j] = s[j]
    ypred = np.empty(10)
    for t in range(1, n):
        delta = u[t, 0]
        td = u[t, 1]
        tb = u[t, 2]
        sensor_outputs(s, delta, p, ypred)
        snew = rk4_step(s, delta, td, tb, p, dt)
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        c3 = 0.0
        for j in range(10):
            e = y_meas[t, j] - ypred[j]
            c0 += gain[0, j] * e
            c1 += gain[1, j] * e
            c2 += gain[2, j] * e
            c3 += gain[3, j] * e
        snew[3] += c0
        snew[5] += c1
        snew[6] += c2
        snew[9] += c3
        if _state_bad(snew):
            return t, False
        s = snew
        for j in range(10):
            traj[t, j] = s[j]
    return n, True


@_jit
def open_loop_pass(x0, u, p, dt, traj):
    """Open-loop twin/plant sweep; returns (n_valid, ok)."""
    n = u.shape[0]
    s = x0.copy()
    for j in range(10):
        traj[0, j] = s[j]
    for t in range(1, n):
        s = rk4_step(s, u[t, 0], u[t, 1], u[t, 2], p, dt)
        if _state_bad(s):
            return t, False
        for j in range(10):
            traj[t, j] = s[j]
    return n, True


@_jit
def plant_pass(x0, delta_series, v_ref, p, dt, kv, a_drive_max, a_brake_max,
               traj, u_out, y_out):
    """Simulate the plant with a speed-tracking torque regulator.

    The applied torque is a P-law on the speed error, a_dem = kv*(v_ref - vx)
    clipped to the per-sample traction budgets a_drive_max / a_brake_max,
    converted to axle torque. Realized inputs are recorded in u_out; noiseless
    sensor readings y_out[t] are taken at the pre-step state, matching the
    one-step-ahead output convention of the observer.

    Returns (n_valid, ok).
    """
    n = delta_series.shape[0]
    m = p[0]
    rw = p[5]
    s = x0.copy()
    for j in range(10):
        traj[0, j] = s[j]
    u_out[0, 0] = delta_series[0]
    u_out[0, 1] = 0.0
    u_out[0, 2] = 0.0
    ytmp = np.empty(10)
    sensor_outputs(s, delta_series[0], p, ytmp)
    for j in range(10):
        y_out[0, j] = ytmp[j]
    for t in range(1, n):
        a_dem = kv * (v_ref[t] - s[3])
        if a_dem > a_drive_max[t]:
            a_dem = a_drive_max[t]
        elif a_dem < -a_brake_max[t]:
            a_dem = -a_brake_max[t]
        tau = m * a_dem * rw
        if tau >= 0.0:
            td = tau
            tb = 0.0
        else:
            td = 0.0
            tb = -tau
        delta = delta_series[t]
        u_out[t, 0] = delta
        u_out[t, 1] = td
        u_out[t, 2] = tb
        sensor_outputs(s, delta, p, ytmp)
        for j in range(10):
            y_out[t, j] = ytmp[j]
        s = rk4_step(s, delta, td, tb, p, dt)
        if _state_bad(s):
            return t, False
        for j in range(10):
            traj[t, j] = s[j]
    return n, True


# ---------------------------------------------------------------------------
# EKF on the dynamic single-track model with random-walk force states
# ---------------------------------------------------------------------------
# state: [vx, vy, wz, Fx, Fyf, Fyr]; input: steering delta
# measurements: [a_x, a_y, wz, vx]


@_jit
def ekf_predict_model(x, delta, ep, xdot, jac):
    """Continuous-time kinetics and its Jacobian.

    ep: EKF vehicle parameters [m, iz, a, b, c_drag, c_roll, eps_v]
    """
    m = ep[0]
    iz = ep[1]
    a = ep[2]
    b = ep[3]
    cd = ep[4]
    cr = ep[5]
    eps_v = ep[6]

    vx = x[0]
    vy = x[1]
    wz = x[2]
    fx = x[3]
    fyf = x[4]
    fyr = x[5]
    sd = math.sin(delta)
    cdl = math.cos(delta)

    th = math.tanh(vx / eps_v)
    drag = cd * vx * abs(vx)
    roll = cr * m * GRAVITY * th

    xdot[0] = (fx - fyf * sd - drag - roll) / m + vy * wz
    xdot[1] = (fyf * cdl + fyr) / m - vx * wz
    xdot[2] = (a * fyf * cdl - b * fyr) / iz
    xdot[3] = 0.0
    xdot[4] = 0.0
    xdot[5] = 0.0

    for i in range(6):
        for j in range(6):
            jac[i, j] = 0.0
    ddrag = 2.0 * cd * abs(vx)
    droll = cr * m * GRAVITY * (1.0 - th * th) / eps_v
    jac[0, 0] = -(ddrag + droll) / m
    jac[0, 1] = wz
    jac[0, 2] = vy
    jac[0, 3] = 1.0 / m
    jac[0, 4] = -sd / m
    jac[1, 0] = -wz
    jac[1, 2] = -vx
    jac[1, 4] = cdl / m
    jac[1, 5] = 1.0 / m
    jac[2, 4] = a * cdl / iz
    jac[2, 5] = -b / iz


@_jit
def ekf_measure_model(x, delta, ep, h, H):
    """Measurement prediction [a_x, a_y, wz, vx] and Jacobian."""
    m = ep[0]
    cd = ep[4]
    cr = ep[5]
    eps_v = ep[6]

    vx = x[0]
    fx = x[3]
    fyf = x[4]
    fyr = x[5]
    sd = math.sin(delta)
    cdl = math.cos(delta)
    th = math.tanh(vx / eps_v)
    drag = cd * vx * abs(vx)
    roll = cr * m * GRAVITY * th

    h[0] = (fx - fyf * sd - drag - roll) / m
    h[1] = (fyf * cdl + fyr) / m
    h[2] = x[2]
    h[3] = vx

    for i in range(4):
        for j in range(6):
            H[i, j] = 0.0
    ddrag = 2.0 * cd * abs(vx)
    droll = cr * m * GRAVITY * (1.0 - th * th) / eps_v
    H[0, 0] = -(ddrag + droll) / m
    H[0, 3] = 1.0 / m
    H[0, 4] = -sd / m
    H[1, 4] = cdl / m
    H[1, 5] = 1.0 / m
    H[2, 2] = 1.0
    H[3, 0] = 1.0


@_jit
def ekf_step_core(x, P, delta, z, ep, Qd, Rd, dt):
    """One EKF predict+update (Joseph form). Returns (x, P, ok)."""
    xdot = np.empty(6)
    J = np.empty((6, 6))
    ekf_predict_model(x, delta, ep, xdot, J)
    xp = x + dt * xdot
    F = np.eye(6) + dt * J
    Pp = F @ P @ F.T
    for i in range(6):
        Pp[i, i] += Qd[i]

    h = np.empty(4)
    H = np.empty((4, 6))
    ekf_measure_model(xp, delta, ep, h, H)
    S = H @ Pp @ H.T
    for i in range(4):
        S[i, i] += Rd[i]
    ok = True
    for i in range(4):
        for j in range(4):
            if not math.isfinite(S[i, j]):
                ok = False
    if not ok:
        return xp, Pp, False
    K = np.linalg.solve(S.T, (Pp @ H.T).T).T  # Pp H^T S^-1
    innov = z - h
    xn = xp + K @ innov
    IKH = np.eye(6) - K @ H
    Pn = IKH @ Pp @ IKH.T
    KR = K.copy()
    for i in range(6):
        for j in range(4):
            KR[i, j] = K[i, j] * Rd[j]
    Pn = Pn + KR @ K.T
    # re-symmetrize against roundoff drift
    Pn = 0.5 * (Pn + Pn.T)
    for i in range(6):
        if not math.isfinite(xn[i]):
            return xn, Pn, False
    if abs(xn[0]) > VX_LIMIT or abs(xn[2]) > WZ_LIMIT:
        return xn, Pn, False
    return xn, Pn, True


@_jit
def ekf_pass(x0, P0, deltas, z, ep, Qd, Rd, dt, traj):
    """Full-dataset EKF sweep. Returns (n_valid, stable)."""
    n = deltas.shape[0]
    x = x0.copy()
    P = P0.copy()
    for j in range(6):
        traj[0, j] = x[j]
    for t in range(1, n):
        x, P, ok = ekf_step_core(x, P, deltas[t], z[t], ep, Qd, Rd, dt)
        if not ok:
            return t, False
        for j in range(6):
            traj[t, j] = x[j]
    return n, True

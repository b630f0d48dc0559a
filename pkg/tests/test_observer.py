"""Correction loop: stepping, full runs, losses, stability flagging."""

import math

import numpy as np
import pytest

from tilkit import (DEFAULT_BOUNDS, DriverInput, GainMatrix, NoiseSpec,
                    ReducedGain, VehicleState, evaluate_loss, generate_dataset,
                    observer_step, run_observer, sideslip, twin_output,
                    twin_step)
from tilkit.observer import (INFEASIBLE, ObserverRun, default_initial_state,
                             effective_gain, entry_label, export_run,
                             scalar_observer_errors)

DT = 0.01


def wide_bounds(scale=10.0):
    b = DEFAULT_BOUNDS.copy() * scale
    return b


def hand_gain():
    K = np.zeros((4, 3))
    K[1, 0] = 0.5
    K[2, 1] = 0.5
    K[3, 2] = 0.5
    K[0, 1] = 0.2
    K[0, 2] = 0.2
    return GainMatrix(K)


# ---------------------------------------------------------------------------
# GainMatrix / ReducedGain validation
# ---------------------------------------------------------------------------

def test_gain_matrix_mask_semantics():
    mask = np.zeros((4, 3), dtype=bool)
    mask[1, 0] = True
    K = GainMatrix.from_vector([0.7], mask=mask)
    assert K.entries[1, 0] == 0.7
    assert np.all(K.entries[~mask] == 0.0)
    with pytest.raises(ValueError):
        entries = np.zeros((4, 3))
        entries[0, 0] = 0.1  # nonzero outside the mask
        GainMatrix(entries, mask=mask)


def test_gain_matrix_bounds_checked():
    entries = np.zeros((4, 3))
    entries[1, 0] = 2.0  # above the (0, 1.5) range
    with pytest.raises(ValueError, match="wz->wz"):
        GainMatrix(entries)
    with pytest.raises(ValueError):
        bad = DEFAULT_BOUNDS.copy()
        bad[0, 0] = (0.5, 1.0)  # does not straddle zero
        GainMatrix.zeros(bounds=bad)


def test_gain_vector_roundtrip():
    mask = np.ones((4, 3), dtype=bool)
    ab = GainMatrix.zeros().active_bounds()
    vec = ab[:, 0] + 0.25 * (ab[:, 1] - ab[:, 0])
    K = GainMatrix.from_vector(vec, mask=mask)
    np.testing.assert_array_equal(K.to_vector(), vec)
    assert len(K.labels()) == 12
    assert K.labels()[0] == entry_label(0, 0) == "wz->vx"


# ---------------------------------------------------------------------------
# observer_step
# ---------------------------------------------------------------------------

def test_zero_gain_equals_open_loop_step(twin_params, matched_dataset):
    ds = matched_dataset
    s = VehicleState.from_array(ds.x_meas[50])
    u = DriverInput(*ds.u[51])
    y = twin_output(s, None, u, twin_params)  # arbitrary consistent reading
    stepped = observer_step(s, u, y, GainMatrix.zeros(), params=twin_params)
    pure = twin_step(s, u, twin_params, DT)
    np.testing.assert_array_equal(stepped.as_array(), pure.as_array())


def test_zero_output_error_means_zero_correction(twin_params, matched_dataset):
    """Estimator at the true state with matched params and no noise: the
    correction term vanishes for any gain."""
    ds = matched_dataset
    s = VehicleState.from_array(ds.x_meas[100])
    u = DriverInput(*ds.u[101])
    y_true = ds.y_meas[101]  # recorded as h(x(100), u(101)), noiseless
    stepped = observer_step(s, u, as_sensor(y_true), hand_gain(),
                            params=twin_params)
    pure = twin_step(s, u, twin_params, DT)
    np.testing.assert_allclose(stepped.as_array(), pure.as_array(), atol=1e-12)


def as_sensor(arr):
    from tilkit import SensorOutput
    return SensorOutput.from_array(arr)


def test_correction_locality(twin_params, matched_dataset):
    """With an injected output error, only the four correctable states
    receive a direct correction."""
    ds = matched_dataset
    s = VehicleState.from_array(ds.x_meas[100])
    u = DriverInput(*ds.u[101])
    y = ds.y_meas[101].copy()
    y[5] += 3.0   # gyro error, deg/s
    y[6] += 1.0   # front-left encoder error
    y[9] += 0.5   # rear-right encoder error
    stepped = observer_step(s, u, as_sensor(y), hand_gain(),
                            params=twin_params).as_array()
    pure = twin_step(s, u, twin_params, DT).as_array()
    corrected = {3, 5, 6, 9}
    for idx in range(10):
        if idx in corrected:
            assert stepped[idx] != pure[idx]
        else:
            assert stepped[idx] == pure[idx]


def test_scalar_gain_stability_boundary():
    stable = scalar_observer_errors(1.0, steps=100)
    assert abs(stable[-1]) < 1e-12
    diverging = scalar_observer_errors(2.1, steps=100)
    assert abs(diverging[-1]) > 1e2
    assert np.all(np.abs(diverging[1:]) >= np.abs(diverging[:-1]))


# ---------------------------------------------------------------------------
# run_observer
# ---------------------------------------------------------------------------

def test_perfect_replay_loss(matched_dataset):
    run = run_observer(matched_dataset, GainMatrix.zeros(),
                       x0=VehicleState.from_array(matched_dataset.x_meas[0]))
    assert run.stable
    assert run.rmse_vx < 1e-6
    assert evaluate_loss(run) < 1e-6


def test_hand_gain_beats_open_loop(mismatch_dataset):
    r0 = run_observer(mismatch_dataset, GainMatrix.zeros())
    r1 = run_observer(mismatch_dataset, hand_gain())
    assert r1.stable and r0.stable
    assert r1.rmse_vx < r0.rmse_vx
    assert evaluate_loss(r1) < evaluate_loss(r0)


def test_gain_beyond_stability_range_diverges(mismatch_dataset):
    entries = np.zeros((4, 3))
    entries[2, 1] = 2.5  # front-left wheel self-gain past the (0,2) boundary
    K = GainMatrix(entries, bounds=wide_bounds())
    run = run_observer(mismatch_dataset, K)
    assert not run.stable
    assert evaluate_loss(run) == INFEASIBLE
    assert run.rmse_vx == INFEASIBLE


def test_run_observer_matches_stepping(twin_params, mismatch_dataset):
    ds = mismatch_dataset
    K = hand_gain()
    run = run_observer(ds, K, params=twin_params, vx_offset=2.0)
    s = default_initial_state(ds, 2.0)
    from tilkit import SensorOutput
    for t in range(1, 40):
        u = DriverInput(*ds.u[t])
        s = observer_step(s, u, SensorOutput.from_array(ds.y_meas[t]), K,
                          params=twin_params)
    np.testing.assert_allclose(run.x_est[39], s.as_array(), atol=1e-10)


def test_masked_entry_zeroing_is_literal(mismatch_dataset):
    """Zeroing an entry and masking it out give bitwise-identical losses."""
    K_full = hand_gain()
    entries = K_full.entries.copy()
    entries[0, 1] = 0.0
    mask = np.ones((4, 3), dtype=bool)
    zeroed = GainMatrix(entries)
    mask2 = mask.copy()
    mask2[0, 1] = False
    masked = GainMatrix(entries, mask=mask2)
    r_zero = run_observer(mismatch_dataset, zeroed)
    r_mask = run_observer(mismatch_dataset, masked)
    assert evaluate_loss(r_zero) == evaluate_loss(r_mask)
    np.testing.assert_array_equal(r_zero.x_est, r_mask.x_est)


# ---------------------------------------------------------------------------
# loss arithmetic
# ---------------------------------------------------------------------------

def _loss_with_injected_error(matched_dataset, vx_err_kmh, wz_err_degs):
    """Perfect replay plus a known ground-truth offset: the run's error
    series equals the injected series exactly."""
    from dataclasses import replace as dreplace
    ds = matched_dataset
    gt = ds.x_meas.copy()
    n = len(ds) - 1
    gt[1:, 3] += np.asarray(vx_err_kmh) / 3.6
    gt[1:, 5] += np.radians(np.asarray(wz_err_degs))
    ds2 = type(ds)(dt=ds.dt, t=ds.t, u=ds.u, y_meas=ds.y_meas, x_meas=gt,
                   label=ds.label)
    run = run_observer(ds2, GainMatrix.zeros(),
                       x0=VehicleState.from_array(ds.x_meas[0]))
    return run


def test_loss_of_constant_errors(matched_dataset):
    n = len(matched_dataset) - 1
    run = _loss_with_injected_error(matched_dataset, np.full(n, 1.0),
                                    np.full(n, 0.5))
    assert evaluate_loss(run) == pytest.approx(1.5, abs=1e-9)


def test_loss_of_sinusoidal_error(matched_dataset):
    """rms of a sinusoid sampled over whole periods is A/sqrt(2) exactly."""
    n = len(matched_dataset) - 1
    m = 8  # whole periods across the n samples
    amp = 2.0
    phases = 2.0 * math.pi * m * np.arange(1, n + 1) / n
    run = _loss_with_injected_error(matched_dataset, amp * np.sin(phases),
                                    np.zeros(n))
    assert evaluate_loss(run) == pytest.approx(amp / math.sqrt(2), abs=1e-6)


def test_zero_loss(matched_dataset):
    n = len(matched_dataset) - 1
    run = _loss_with_injected_error(matched_dataset, np.zeros(n), np.zeros(n))
    assert evaluate_loss(run) == 0.0


# ---------------------------------------------------------------------------
# sideslip
# ---------------------------------------------------------------------------

def test_sideslip_basics():
    assert sideslip(VehicleState(v_x=20.0, v_y=0.0)) == 0.0
    assert sideslip(VehicleState(v_x=15.0, v_y=15.0)) == pytest.approx(45.0)
    assert sideslip(VehicleState(v_x=0.1, v_y=5.0)) == 0.0  # below floor


def test_sideslip_envelope_threshold():
    """23 deg at 100 km/h needs v_y past atan's inverse at that speed."""
    vx = 100.0 / 3.6
    v_y_needed = vx * math.tan(math.radians(23.0))
    assert v_y_needed == pytest.approx(11.79, abs=0.01)
    assert sideslip(VehicleState(v_x=vx, v_y=11.79)) == pytest.approx(23.0,
                                                                      abs=0.01)
    assert sideslip(VehicleState(v_x=vx, v_y=11.0)) < 23.0


# ---------------------------------------------------------------------------
# reduced gain plumbing and exports
# ---------------------------------------------------------------------------

def test_reduced_gain_effective_correction(mismatch_dataset):
    """The reduced gain's effective correction equals K_red @ T @ e_y."""
    from tilkit import convert_bounds, mbr_ranges, pca_reduce
    rmap = pca_reduce(mismatch_dataset, target=3)
    bounds4 = mbr_ranges(mismatch_dataset,
                         channels=("enc_fl", "enc_fr", "enc_rl", "enc_rr"))
    bounds_red = convert_bounds(bounds4, rmap.error_map())
    entries = 0.25 * bounds_red[..., 1]  # quarter of the converted box
    rg = ReducedGain(entries, rmap, bounds=bounds_red)
    G = effective_gain(rg)
    # explicit composition over the four encoder channels
    sel = np.zeros((4, 10))
    for r, ch in enumerate((6, 7, 8, 9)):
        sel[r, ch] = 1.0
    units = np.diag([1 / 3.6, math.pi / 180.0, 1.0, 1.0])
    expect = units @ entries @ rmap.error_map() @ sel
    np.testing.assert_allclose(G, expect, atol=1e-12)
    run = run_observer(mismatch_dataset, rg)
    assert run.stable


def test_reduced_gain_must_reduce(mismatch_dataset):
    from tilkit import pca_reduce
    with pytest.raises(ValueError):
        rmap = pca_reduce(mismatch_dataset, target=4)
        ReducedGain(np.zeros((4, 4)), rmap)


def test_export_run_roundtrip(tmp_path, matched_dataset):
    run = run_observer(matched_dataset, GainMatrix.zeros())
    export_run(run, matched_dataset, tmp_path / "run")
    import json
    with open(tmp_path / "run.json") as f:
        summary = json.load(f)
    assert set(summary) == {"rmse_vx", "rmse_wz", "rmse_beta", "stable",
                            "wall_time"}
    header = (tmp_path / "run.csv").read_text().splitlines()[0]
    assert header.startswith("t,vx_est,vx_gt")

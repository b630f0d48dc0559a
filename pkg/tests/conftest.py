import numpy as np
import pytest

from tilkit import (NoiseSpec, ScenarioSpec, VehicleParams, generate_dataset,
                    mismatch_preset, scenario_preset)


@pytest.fixture(scope="session")
def twin_params():
    return VehicleParams()


@pytest.fixture(scope="session")
def plant_params():
    return mismatch_preset()


@pytest.fixture(scope="session")
def short_scenario():
    """8 s mixed scenario, cheap enough for per-test simulation."""
    return ScenarioSpec("short", duration=8.0, steer_kind="mixed",
                        lat_accel=6.0, steer_period=4.0, speed_kind="pulses",
                        speed_lo=16.0, speed_hi=24.0, speed_period=6.0)


@pytest.fixture(scope="session")
def matched_dataset(short_scenario, twin_params):
    """Plant == twin, no sensor noise: the observer can be exact."""
    return generate_dataset(short_scenario, twin_params, noise_seed=0,
                            noise=NoiseSpec.silent())


@pytest.fixture(scope="session")
def mismatch_dataset(short_scenario, plant_params):
    return generate_dataset(short_scenario, plant_params, noise_seed=11)


@pytest.fixture(scope="session")
def opt_dataset(plant_params):
    """Full-length tuning scenario with the default mismatch and noise."""
    return generate_dataset(scenario_preset("optimization"), plant_params,
                            noise_seed=101)


@pytest.fixture(scope="session")
def val_a_dataset(plant_params):
    return generate_dataset(scenario_preset("val_a"), plant_params,
                            noise_seed=202)


def rms(x):
    return float(np.sqrt(np.mean(np.square(np.asarray(x)))))

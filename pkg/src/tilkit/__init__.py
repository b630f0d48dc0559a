"""Twin-in-the-loop vehicle-state observer toolkit.

Builds, tunes and dimensionality-reduces observers that wrap a black-box
vehicle simulator with a constant output-error correction gain, tuned by
parallel constrained Bayesian optimization, with an EKF benchmark and
synthetic vehicle-dynamics datasets generated in-repo.
"""

__version__ = "0.1.0"

from .vehicle import (VehicleState, DriverInput, SensorOutput, VehicleParams,
                      twin_step, twin_output, mismatch_preset)
from .scenarios import (Dataset, NoiseSpec, ScenarioSpec, SCENARIOS,
                        SimulationDivergence, generate_dataset,
                        scenario_preset)
from .observer import (GainMatrix, ReducedGain, ObserverRun, DEFAULT_BOUNDS,
                       observer_step, run_observer, evaluate_loss, sideslip)
from .gp import (KernelHyper, GpModel, kernel_eval, gp_posterior,
                 fit_hyperparameters, log_marginal_likelihood)
from .bo import (OptimizationProblem, EvaluationRecord, BoResult,
                 NoFeasiblePointError, expected_improvement,
                 feasibility_weight, impute_in_flight, maximize_acquisition,
                 run_parallel_bo)
from .reduction import (ParameterRanking, RankedEntry, ReductionMap,
                        mbr_ranges, mbr_plan, normalize_gain,
                        l1_of_normalized, structure_optimize, prune,
                        pca_reduce, convert_bounds)
from .ekf import EkfConfig, ekf_step, run_ekf, tune_qr
from .tuning import TuningBudget, MatrixGainSpace, ReducedGainSpace, \
    ObserverEvaluator

__all__ = [
    "VehicleState", "DriverInput", "SensorOutput", "VehicleParams",
    "twin_step", "twin_output", "mismatch_preset",
    "Dataset", "NoiseSpec", "ScenarioSpec", "SCENARIOS",
    "SimulationDivergence", "generate_dataset", "scenario_preset",
    "GainMatrix", "ReducedGain", "ObserverRun", "DEFAULT_BOUNDS",
    "observer_step", "run_observer", "evaluate_loss", "sideslip",
    "KernelHyper", "GpModel", "kernel_eval", "gp_posterior",
    "fit_hyperparameters", "log_marginal_likelihood",
    "OptimizationProblem", "EvaluationRecord", "BoResult",
    "NoFeasiblePointError", "expected_improvement", "feasibility_weight",
    "impute_in_flight", "maximize_acquisition", "run_parallel_bo",
    "ParameterRanking", "RankedEntry", "ReductionMap", "mbr_ranges",
    "mbr_plan", "normalize_gain", "l1_of_normalized", "structure_optimize",
    "prune", "pca_reduce", "convert_bounds",
    "EkfConfig", "ekf_step", "run_ekf", "tune_qr",
    "TuningBudget", "MatrixGainSpace", "ReducedGainSpace",
    "ObserverEvaluator",
]

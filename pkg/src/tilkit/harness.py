"""Experiment orchestration: configs, pipelines, repeated-run statistics.

Every pipeline stage is a plain function over an ExperimentConfig plus file
paths, so the CLI is a thin shell and tests can drive stages in-process.
Seeds for repeats, scenarios and optimizer runs all derive from the single
master seed, making whole pipelines replayable.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bo import NoFeasiblePointError, OptimizationProblem, run_parallel_bo, \
    trace_to_csv
from .ekf import EkfConfig, run_ekf, tune_qr
from .observer import (DEFAULT_BOUNDS, GainMatrix, ReducedGain, evaluate_loss,
                       run_observer)
from .reduction import (ParameterRanking, ReductionMap, convert_bounds,
                        mbr_plan, mbr_ranges, pca_reduce, prune,
                        structure_optimize)
from .scenarios import (Dataset, NoiseSpec, SCENARIOS, ScenarioSpec,
                        generate_dataset, scenario_from_dict)
from .tuning import (MatrixGainSpace, ObserverEvaluator, ReducedGainSpace,
                     TuningBudget)
from .vehicle import VehicleParams


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Parsed experiment description; see configs/desk.toml for the layout."""
    name: str = "desk"
    master_seed: int = 7
    repeats: int = 5
    budget: TuningBudget = field(default_factory=TuningBudget)
    optimization_scenario: str = "optimization"
    validation_scenarios: tuple = ("val_a", "val_b", "val_c", "val_d", "val_e")
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    mismatch: dict = field(default_factory=lambda: {
        "mass_factor": 1.08, "tire_d_factor": 0.88,
        "drag_factor": 1.20, "roll_factor": 1.15})
    vx_offset: float = 2.0
    bounds_mode: str = "heuristic"   # heuristic | table
    pipeline: str = "mbr"            # mbr | sdr | udr | sdr_udr | full
    level: int = 5
    delta: float = 0.10
    ub_vx: float = 1.5
    ub_wz: float = 1.5
    components: int = 3
    ekf_budget: TuningBudget = field(default_factory=TuningBudget)
    ekf_decades: float = 4.0
    custom_scenarios: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for name in (self.optimization_scenario, *self.validation_scenarios):
            if name not in SCENARIOS and name not in self.custom_scenarios:
                raise ConfigError(f"unknown scenario {name!r}")
        if self.bounds_mode not in ("heuristic", "table"):
            raise ConfigError(f"bad bounds_mode {self.bounds_mode!r}")
        if self.pipeline not in ("mbr", "sdr", "udr", "sdr_udr", "full"):
            raise ConfigError(f"bad pipeline {self.pipeline!r}")

    def scenario(self, name: str) -> ScenarioSpec:
        if name in self.custom_scenarios:
            return self.custom_scenarios[name]
        return SCENARIOS[name]

    def plant_params(self) -> VehicleParams:
        return VehicleParams().perturbed(**self.mismatch)

    def all_scenarios(self) -> list:
        return [self.optimization_scenario, *self.validation_scenarios]

    @staticmethod
    def from_toml(path) -> "ExperimentConfig":
        try:
            with open(Path(path), "rb") as f:
                raw = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return ExperimentConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        try:
            exp = raw.get("experiment", {})
            bud = raw.get("budget", {})
            dat = raw.get("data", {})
            obs = raw.get("observer", {})
            red = raw.get("reduction", {})
            ekf = raw.get("ekf", {})
            budget = TuningBudget(n_total=bud.get("n_total", 150),
                                  n_seed=bud.get("n_seed", 50),
                                  workers=bud.get("workers", 2))
            ekf_budget = TuningBudget(n_total=ekf.get("n_total", 150),
                                      n_seed=ekf.get("n_seed", 50),
                                      workers=ekf.get("workers", 2))
            custom = {name: scenario_from_dict({"name": name, **body})
                      for name, body in raw.get("scenario", {}).items()}
            return ExperimentConfig(
                name=exp.get("name", "desk"),
                master_seed=exp.get("master_seed", 7),
                repeats=exp.get("repeats", 5),
                budget=budget,
                optimization_scenario=dat.get("optimization", "optimization"),
                validation_scenarios=tuple(dat.get(
                    "validations",
                    ("val_a", "val_b", "val_c", "val_d", "val_e"))),
                noise=NoiseSpec(dat.get("noise_accel", 0.05),
                                dat.get("noise_gyro", 0.2),
                                dat.get("noise_encoder", 0.05)),
                mismatch={"mass_factor": dat.get("mismatch_mass", 1.08),
                          "tire_d_factor": dat.get("mismatch_tire", 0.88),
                          "drag_factor": dat.get("mismatch_drag", 1.20),
                          "roll_factor": dat.get("mismatch_roll", 1.15)},
                vx_offset=obs.get("vx_offset", 2.0),
                bounds_mode=obs.get("bounds", "heuristic"),
                pipeline=red.get("pipeline", "mbr"),
                level=red.get("level", 5),
                delta=red.get("delta", 0.10),
                ub_vx=red.get("ub_vx", 1.5),
                ub_wz=red.get("ub_wz", 1.5),
                components=red.get("components", 3),
                ekf_budget=ekf_budget,
                ekf_decades=ekf.get("decades", 4.0),
                custom_scenarios=custom)
        except (TypeError, ValueError, KeyError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"bad config: {err}") from err


def derive_seeds(master_seed: int, n: int, tag: str = "") -> list:
    """n deterministic child seeds of the master seed (tag-separated)."""
    root = np.random.SeedSequence([master_seed, abs(hash(tag)) % (2 ** 31)])
    return [int(c.generate_state(1)[0] % 2 ** 31) for c in root.spawn(n)]


# ---------------------------------------------------------------------------
# Repeated-run statistics
# ---------------------------------------------------------------------------

METRICS = ("rmse_vx", "rmse_beta", "rmse_wz", "wall_time")


def aggregate_stats(values) -> dict:
    """Order statistics with linear (R-7) quartile interpolation."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no rows to aggregate")
    return {"median": float(np.percentile(values, 50)),
            "q25": float(np.percentile(values, 25)),
            "q75": float(np.percentile(values, 75)),
            "min": float(values.min()), "max": float(values.max())}


@dataclass
class RunSummary:
    """Per-repeat metric rows plus their box-plot aggregates."""
    rows: list
    aggregates: dict = None

    def __post_init__(self):
        if self.aggregates is None:
            self.aggregates = self._compute()

    def _compute(self) -> dict:
        return {m: aggregate_stats([r[m] for r in self.rows])
                for m in METRICS if all(m in r for r in self.rows)}

    def to_json(self, path) -> None:
        with open(Path(path), "w") as f:
            json.dump({"rows": self.rows, "aggregates": self.aggregates},
                      f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def from_json(path) -> "RunSummary":
        with open(Path(path)) as f:
            d = json.load(f)
        summary = RunSummary(rows=d["rows"])
        for metric, stats in d["aggregates"].items():
            fresh = summary.aggregates.get(metric)
            if fresh is None or any(abs(fresh[k] - stats[k]) > 1e-9
                                    for k in fresh):
                raise ValueError(f"stored aggregates for {metric} do not "
                                 "match the per-repeat rows")
        return summary


# ---------------------------------------------------------------------------
# Gain artifact (de)serialization
# ---------------------------------------------------------------------------

def save_gain(gain, path) -> None:
    path = Path(path)
    if isinstance(gain, GainMatrix):
        payload = {"kind": "matrix", "entries": gain.entries.tolist(),
                   "mask": gain.mask.astype(int).tolist(),
                   "bounds": gain.bounds.tolist()}
    elif isinstance(gain, ReducedGain):
        payload = {"kind": "reduced", "entries": gain.entries.tolist(),
                   "bounds": None if gain.bounds is None
                   else gain.bounds.tolist(),
                   "map": {"directions": gain.reduction.directions.tolist(),
                           "scales": gain.reduction.scales.tolist(),
                           "means": gain.reduction.means.tolist(),
                           "channels": list(gain.reduction.channels),
                           "power_fractions":
                               gain.reduction.power_fractions.tolist(),
                           "retained": gain.reduction.retained}}
    else:
        raise TypeError(f"cannot serialize {type(gain).__name__}")
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_gain(path):
    with open(Path(path)) as f:
        d = json.load(f)
    if d["kind"] == "matrix":
        return GainMatrix(np.array(d["entries"]),
                          mask=np.array(d["mask"], dtype=bool),
                          bounds=np.array(d["bounds"]))
    if d["kind"] == "reduced":
        m = d["map"]
        red = ReductionMap(np.array(m["directions"]), np.array(m["scales"]),
                           np.array(m["means"]), tuple(m["channels"]),
                           np.array(m["power_fractions"]), m["retained"])
        bounds = None if d["bounds"] is None else np.array(d["bounds"])
        return ReducedGain(np.array(d["entries"]), red, bounds=bounds)
    raise ValueError(f"unknown gain kind {d['kind']!r}")


def save_ekf(config: EkfConfig, path) -> None:
    payload = {"kind": "ekf", "mass": config.mass,
               "yaw_inertia": config.yaw_inertia, "a_front": config.a_front,
               "b_rear": config.b_rear, "drag_coeff": config.drag_coeff,
               "roll_coeff": config.roll_coeff,
               "wheel_radius": config.wheel_radius, "eps_v": config.eps_v,
               "q_diag": config.q_diag.tolist(),
               "r_diag": config.r_diag.tolist(),
               "p0_diag": config.p0_diag.tolist()}
    with open(Path(path), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_ekf(path) -> EkfConfig:
    with open(Path(path)) as f:
        d = json.load(f)
    if d.pop("kind", "ekf") != "ekf":
        raise ValueError("not an EKF artifact")
    return EkfConfig(**{k: (np.array(v) if isinstance(v, list) else v)
                        for k, v in d.items()})


def load_artifact(path):
    with open(Path(path)) as f:
        kind = json.load(f).get("kind")
    return load_ekf(path) if kind == "ekf" else load_gain(path)


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def pipeline_generate(config: ExperimentConfig, out_dir) -> dict:
    """Write every configured dataset; returns {scenario: Dataset}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plant = config.plant_params()
    names = config.all_scenarios()
    seeds = derive_seeds(config.master_seed, len(names), "datasets")
    datasets = {}
    for name, seed in zip(names, seeds):
        ds = generate_dataset(config.scenario(name), plant, noise_seed=seed,
                              noise=config.noise)
        ds.save(out_dir / name)
        datasets[name] = ds
    return datasets


def load_datasets(config: ExperimentConfig, data_dir) -> dict:
    data_dir = Path(data_dir)
    out = {}
    for name in config.all_scenarios():
        path = data_dir / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing dataset {path}; "
                                    "run the generate stage first")
        out[name] = Dataset.load(data_dir / name)
    return out


def observer_bounds(config: ExperimentConfig, data: Dataset,
                    channels=("wz", "enc_fl", "enc_rr")) -> np.ndarray:
    if config.bounds_mode == "table" and len(channels) == 3:
        return DEFAULT_BOUNDS.copy()
    return mbr_ranges(data, channels=channels)


def tune_gain_once(data: Dataset, space, budget: TuningBudget,
                   vx_offset: float = 2.0, scheduler: str = "virtual"):
    """One constrained performance optimization over a gain space.

    The zero gain (open-loop twin, always stable) is seeded as the first
    point, so there is a feasible incumbent from the start.
    """
    ev = ObserverEvaluator(data, space, vx_offset=vx_offset)
    problem = OptimizationProblem(
        bounds=space.bounds_vec, objective=ev.loss,
        constraints=[ev.stable], n_total=budget.n_total,
        n_seed=budget.n_seed, workers=budget.workers, seed=budget.seed,
        initial_points=[np.zeros(space.dim)])
    result = run_parallel_bo(problem, scheduler=scheduler)
    return space.build(result.best_point), result


def _tuning_space(config: ExperimentConfig, data: Dataset, mask=None,
                  reduction_map: ReductionMap | None = None):
    """Gain space for the configured pipeline variant."""
    if reduction_map is not None:
        full_bounds = observer_bounds(config, data,
                                      channels=reduction_map.channels)
        red_bounds = convert_bounds(full_bounds, reduction_map.error_map())
        return ReducedGainSpace(reduction_map, red_bounds, mask=mask)
    bounds = observer_bounds(config, data)
    if mask is None:
        mask = mbr_plan(config.level) if config.pipeline == "mbr" \
            else np.ones((4, 3), dtype=bool)
    return MatrixGainSpace(mask=mask, bounds=bounds)


def pipeline_tune_til(config: ExperimentConfig, data_dir, out_dir,
                      mask=None, reduction_map=None) -> dict:
    """Repeated gain tuning on the optimization dataset.

    Writes k_<r>.json, trace_<r>.csv per repeat plus tune_summary.json and
    k_best.json. Returns {"gains": [...], "results": [...], "summary": ...}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(config, data_dir)
    data = datasets[config.optimization_scenario]
    space = _tuning_space(config, data, mask=mask,
                          reduction_map=reduction_map)
    seeds = derive_seeds(config.master_seed, config.repeats, "tune-til")
    gains, results, rows = [], [], []
    for r, seed in enumerate(seeds):
        gain, result = tune_gain_once(data, space,
                                      config.budget.with_seed(seed),
                                      vx_offset=config.vx_offset)
        gains.append(gain)
        results.append(result)
        save_gain(gain, out_dir / f"k_{r}.json")
        trace_to_csv(result, out_dir / f"trace_{r}.csv")
        rows.append({"repeat": r, "best_loss": result.best_value,
                     "n_evaluations": len(result.records),
                     "wall_time": result.wall_time})
    best_idx = int(np.argmin([row["best_loss"] for row in rows]))
    save_gain(gains[best_idx], out_dir / "k_best.json")
    with open(out_dir / "tune_summary.json", "w") as f:
        json.dump({"rows": rows, "best_repeat": best_idx,
                   "dimension": space.dim,
                   "total_wall_time": sum(r["wall_time"] for r in rows)},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    return {"gains": gains, "results": results, "rows": rows, "space": space}


def pipeline_structure_opt(config: ExperimentConfig, data_dir, out_dir,
                           reduction_map=None) -> dict:
    """Repeated structure optimization; writes rankings and sparse gains."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(config, data_dir)
    data = datasets[config.optimization_scenario]
    if reduction_map is not None:
        space = _tuning_space(config, data, reduction_map=reduction_map)
        bounds = space.bounds
    else:
        bounds = observer_bounds(config, data)
        space = MatrixGainSpace(bounds=bounds)
    seeds = derive_seeds(config.master_seed, config.repeats, "structure-opt")
    out = {"gains": [], "rankings": [], "results": []}
    for r, seed in enumerate(seeds):
        gain, ranking, result = structure_optimize(
            data, bounds, config.ub_vx, config.ub_wz,
            config.budget.with_seed(seed), space=space,
            vx_offset=config.vx_offset)
        ranking.to_csv(out_dir / f"ranking_{r}.csv")
        save_gain(gain, out_dir / f"k_sparse_{r}.json")
        trace_to_csv(result, out_dir / f"trace_{r}.csv")
        out["gains"].append(gain)
        out["rankings"].append(ranking)
        out["results"].append(result)
    return out


def pipeline_prune(ranking_path, delta: float, out_path,
                   shape=(4, 3)) -> np.ndarray:
    ranking = ParameterRanking.from_csv(ranking_path, shape=shape)
    mask = prune(ranking, delta, shape=shape)
    with open(Path(out_path), "w") as f:
        json.dump({"mask": mask.astype(int).tolist(), "delta": delta},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    return mask


def load_mask(path) -> np.ndarray:
    with open(Path(path)) as f:
        return np.array(json.load(f)["mask"], dtype=bool)


def pipeline_tune_ekf(config: ExperimentConfig, data_dir, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(config, data_dir)
    data = datasets[config.optimization_scenario]
    seeds = derive_seeds(config.master_seed, config.repeats, "tune-ekf")
    configs, results, rows = [], [], []
    for r, seed in enumerate(seeds):
        cfg, result = tune_qr(data, config.ekf_budget.with_seed(seed),
                              decades=config.ekf_decades)
        configs.append(cfg)
        results.append(result)
        save_ekf(cfg, out_dir / f"ekf_{r}.json")
        trace_to_csv(result, out_dir / f"trace_{r}.csv")
        rows.append({"repeat": r, "best_loss": result.best_value,
                     "wall_time": result.wall_time})
    best_idx = int(np.argmin([row["best_loss"] for row in rows]))
    save_ekf(configs[best_idx], out_dir / "ekf_best.json")
    with open(out_dir / "tune_summary.json", "w") as f:
        json.dump({"rows": rows, "best_repeat": best_idx}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    return {"configs": configs, "results": results, "rows": rows}


def evaluate_artifact(artifact, data: Dataset, vx_offset: float = 2.0):
    if isinstance(artifact, EkfConfig):
        return run_ekf(data, artifact)
    return run_observer(data, artifact, vx_offset=vx_offset)


def pipeline_validate(config: ExperimentConfig, data_dir, artifact_paths,
                      out_dir) -> list:
    """Run artifacts over every validation dataset; write rows.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(config, data_dir)
    rows = []
    for r, art_path in enumerate(artifact_paths):
        artifact = load_artifact(art_path)
        for name in config.validation_scenarios:
            run = evaluate_artifact(artifact, datasets[name],
                                    vx_offset=config.vx_offset)
            rows.append({"artifact": Path(art_path).name, "repeat": r,
                         "dataset": name, "rmse_vx": run.rmse_vx,
                         "rmse_wz": run.rmse_wz, "rmse_beta": run.rmse_beta,
                         "stable": run.stable, "wall_time": run.wall_time})
    with open(out_dir / "rows.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["artifact", "repeat", "dataset", "rmse_vx", "rmse_wz",
                     "rmse_beta", "stable", "wall_time"])
        for row in rows:
            wr.writerow([row["artifact"], row["repeat"], row["dataset"],
                         repr(float(row["rmse_vx"])),
                         repr(float(row["rmse_wz"])),
                         repr(float(row["rmse_beta"])),
                         int(row["stable"]), repr(float(row["wall_time"]))])
    return rows


def pipeline_report(rows_path, out_dir) -> dict:
    """Aggregate validation rows into boxplot-ready quantile tables.

    summary.csv carries the deterministic metric quantiles; wall-time
    aggregates go to timings.csv since wall clocks vary run to run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(Path(rows_path)) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"no rows in {rows_path}")
    datasets = sorted({r["dataset"] for r in rows})
    report = {}
    for ds in datasets:
        sel = [r for r in rows if r["dataset"] == ds]
        report[ds] = {
            metric: aggregate_stats([float(r[metric]) for r in sel])
            for metric in ("rmse_vx", "rmse_wz", "rmse_beta")}
        report[ds]["wall_time"] = aggregate_stats(
            [float(r["wall_time"]) for r in sel])
        report[ds]["n"] = len(sel)

    def write(path, metrics):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["dataset", "metric", "median", "q25", "q75",
                         "min", "max", "n"])
            for ds in datasets:
                for metric in metrics:
                    st = report[ds][metric]
                    wr.writerow([ds, metric] +
                                [repr(float(st[k])) for k in
                                 ("median", "q25", "q75", "min", "max")] +
                                [report[ds]["n"]])

    write(out_dir / "summary.csv", ("rmse_vx", "rmse_wz", "rmse_beta"))
    write(out_dir / "timings.csv", ("wall_time",))
    with open(out_dir / "summary.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def run_pipeline(config: ExperimentConfig, out_dir) -> dict:
    """Full configured pipeline (generate -> reduce/tune -> validate ->
    report) with per-stage wall-time accounting.

    Returns {"report": ..., "stage_times": {...}, "total_time": float,
    "artifacts": [...]}; stage times add up to the total within bookkeeping
    noise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage_times = {}
    t_total = time.perf_counter()

    def staged(name, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        stage_times[name] = time.perf_counter() - t0
        return out

    data_dir = out_dir / "data"
    staged("generate", pipeline_generate, config, data_dir)

    mask = None
    reduction_map = None
    if config.pipeline in ("udr", "sdr_udr"):
        datasets = load_datasets(config, data_dir)
        opt_data = datasets[config.optimization_scenario]
        reduction_map = staged("pca", pca_reduce, opt_data,
                               target=config.components)
        reduction_map.to_json(out_dir / "reduction_map.json")
    if config.pipeline in ("sdr", "sdr_udr"):
        sdr = staged("structure-opt", pipeline_structure_opt, config,
                     data_dir, out_dir / "sdr", reduction_map=reduction_map)
        n_cols = 3 if reduction_map is None else reduction_map.n_components
        mask = prune(sdr["rankings"][0], config.delta, shape=(4, n_cols))
        with open(out_dir / "mask.json", "w") as f:
            json.dump({"mask": mask.astype(int).tolist(),
                       "delta": config.delta}, f, indent=2, sort_keys=True)
            f.write("\n")

    tune = staged("tune-til", pipeline_tune_til, config, data_dir,
                  out_dir / "tune", mask=mask, reduction_map=reduction_map)
    artifacts = [out_dir / "tune" / f"k_{r}.json"
                 for r in range(config.repeats)]
    staged("validate", pipeline_validate, config, data_dir, artifacts,
           out_dir / "val")
    report = staged("report", pipeline_report, out_dir / "val" / "rows.csv",
                    out_dir / "report")
    total = time.perf_counter() - t_total
    with open(out_dir / "pipeline_times.json", "w") as f:
        json.dump({"stages": stage_times, "total": total}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    return {"report": report, "stage_times": stage_times,
            "total_time": total, "artifacts": artifacts, "tune": tune}

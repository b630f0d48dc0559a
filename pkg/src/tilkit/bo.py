"""Parallel constrained Bayesian optimization.

Seed sampling (Latin hypercube), Matern 5/2 GP surrogates for the objective
and each coupled constraint, expected improvement weighted by the probability
of feasibility, and clipped-model-prediction imputation of in-flight points
so several workers can evaluate concurrently.

Two dispatch modes share the proposal logic: a deterministic virtual-time
scheduler (every evaluation takes one synthetic time unit, so runs are
replayable bit for bit) and a real thread pool for wall-clock parallelism.

The budget counts feasible evaluations only; infeasible ones inform the
constraint surrogates but consume at most 4x extra attempts on top.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from .gp import GpModel, KernelHyper, fit_hyperparameters

logger = logging.getLogger("tilkit.bo")

TOTAL_BUDGET_FACTOR = 5  # hard cap on total evaluations, in units of N


class NoFeasiblePointError(RuntimeError):
    """No stable/feasible evaluation found within the total budget."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class OptimizationProblem:
    """Box-constrained black-box problem with coupled constraints.

    objective returns a loss (may be +inf when the evaluation is unusable).
    Each constraint returns either a real value (feasible iff <= 0) or a
    bool (True = feasible). n_total counts feasible evaluations.
    initial_points, when given, replace the first seed samples so known
    incumbents (a default config, the zero gain) are always evaluated.
    """
    bounds: np.ndarray
    objective: Callable
    constraints: Sequence[Callable] = ()
    n_total: int = 100
    n_seed: int = 20
    workers: int = 2
    seed: int = 0
    initial_points: Sequence = ()

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ValueError("bounds must be (d, 2)")
        if not np.all(np.isfinite(self.bounds)):
            raise ValueError("bounds must be finite")
        if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
            raise ValueError("lower bounds exceed upper bounds")
        if self.n_seed < 1 or self.n_seed >= self.n_total:
            raise ValueError("need 1 <= n_seed < n_total")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if len(self.initial_points) > self.n_seed:
            raise ValueError("more initial points than seed samples")

    @property
    def dim(self) -> int:
        return len(self.bounds)


@dataclass
class EvaluationRecord:
    index: int
    point: np.ndarray
    value: float = math.inf
    constraint_values: tuple = ()
    feasible: bool = False
    status: str = "in-flight"          # in-flight | completed | imputed
    worker: int = 0
    t_dispatch: float = 0.0            # virtual time units
    t_complete: float = 0.0
    wall_time: float = 0.0             # real seconds spent evaluating


@dataclass
class BoResult:
    best_point: np.ndarray
    best_value: float
    records: list
    n_feasible: int
    exhausted: bool
    wall_time: float
    objective_model: GpModel | None = None
    constraint_models: list = field(default_factory=list)

    @property
    def best_trace(self) -> np.ndarray:
        """Running best feasible value over completed evaluations."""
        best = math.inf
        out = []
        for r in self.records:
            if r.feasible and r.value < best:
                best = r.value
            out.append(best)
        return np.array(out)


def expected_improvement(mean, variance, f_best):
    """EI for minimization: (f-mu)*Phi(z) + sigma*phi(z), z=(f-mu)/sigma.

    Zero wherever the predictive deviation is zero. Nonnegative.
    """
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    out = np.zeros(np.broadcast_shapes(mean.shape, sigma.shape))
    diff = np.broadcast_to(f_best - mean, out.shape)
    sig = np.broadcast_to(sigma, out.shape)
    pos = sig > 0.0
    z = diff[pos] / sig[pos]
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out[pos] = diff[pos] * ndtr(z) + sig[pos] * pdf
    out = np.maximum(out, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def feasibility_weight(constraint_models: Sequence[GpModel], query):
    """Product over constraints of P(value <= 0) under each GP posterior."""
    query = np.asarray(query, dtype=float)
    single = query.ndim == 1
    Q = np.atleast_2d(query)
    w = np.ones(len(Q))
    for model in constraint_models:
        if len(model) == 0:
            continue
        mu, var = model.posterior(Q)
        sigma = np.sqrt(np.maximum(var, 0.0))
        z = np.where(sigma > 0.0, -mu / np.maximum(sigma, 1e-300),
                     np.where(mu <= 0.0, np.inf, -np.inf))
        w *= ndtr(z)
    return float(w[0]) if single else w


def impute_in_flight(objective_model: GpModel, pending_points, f_min):
    """Clipped model prediction: GP mean floored at the best completed value."""
    pending_points = np.atleast_2d(np.asarray(pending_points, dtype=float))
    if pending_points.size == 0:
        return np.empty(0)
    mean, _ = objective_model.posterior(pending_points)
    return np.maximum(np.atleast_1d(mean), f_min)


def maximize_acquisition(acq, bounds, seed, n_starts=None, incumbent=None,
                         max_sweeps=32, tol=1e-3, funnel_after=2):
    """Multi-start pattern search over the box; deterministic per seed.

    acq must accept an (m, d) batch and return (m,) values to maximize.
    All starts get `funnel_after` full sweeps, then refinement continues on
    the most promising quarter. Returns the best probed point (always inside
    the box).
    """
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    d = len(bounds)
    lo, hi = bounds[:, 0], bounds[:, 1]
    span = hi - lo
    if n_starts is None:
        n_starts = 8 + 2 * d
    sampler = qmc.LatinHypercube(d=d, seed=seed)
    pts = lo + sampler.random(n_starts) * span
    if incumbent is not None:
        pts = np.vstack([pts, np.clip(incumbent, lo, hi)])
    vals = np.asarray(acq(pts), dtype=float)

    steps = np.full(len(pts), 0.25)
    for sweep in range(max_sweeps):
        if sweep == funnel_after and len(pts) > 8:
            keep = max(8, len(pts) // 4)
            frozen = np.argsort(vals)[:-keep]
            steps[frozen] = 0.0
        active = steps >= tol
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        # probe +-step along every coordinate for all active starts at once
        base = pts[idx]
        probes = np.repeat(base, 2 * d, axis=0)
        offs = np.zeros((len(idx), 2 * d, d))
        for k in range(d):
            offs[:, 2 * k, k] = steps[idx] * span[k]
            offs[:, 2 * k + 1, k] = -steps[idx] * span[k]
        probes = np.clip(probes + offs.reshape(-1, d), lo, hi)
        pvals = np.asarray(acq(probes), dtype=float).reshape(len(idx), 2 * d)
        best_k = np.argmax(pvals, axis=1)
        best_v = pvals[np.arange(len(idx)), best_k]
        improved = best_v > vals[idx]
        for row, i in enumerate(idx):
            if improved[row]:
                pts[i] = probes[row * 2 * d + best_k[row]]
                vals[i] = best_v[row]
            else:
                steps[i] *= 0.5
    best = int(np.argmax(vals))
    return np.clip(pts[best], lo, hi)


def _encode_constraint(raw) -> float:
    if isinstance(raw, (bool, np.bool_)):
        return -1.0 if raw else 1.0
    return float(raw)


def _constraint_ok(raw) -> bool:
    if isinstance(raw, (bool, np.bool_)):
        return bool(raw)
    return float(raw) <= 0.0


class _SurrogateBank:
    """Caches per-surrogate hyperparameters with the refit cadence:
    refit on every conditioning up to 100 points, then every 10th."""

    def __init__(self, n_constraints, seed, restarts=2):
        self.hyper_obj: KernelHyper | None = None
        self.hyper_con = [None] * n_constraints
        self.last_fit_size = {}
        self.seed = seed
        self.restarts = restarts

    def _want_refit(self, key, n_data, cadence):
        # cadence counts total completed evaluations, so capping the
        # conditioning set cannot freeze refitting
        last = self.last_fit_size.get(key, -1)
        if n_data < 2:
            return False
        if cadence <= 100:
            return cadence != last
        return last < 0 or cadence - last >= 10

    def _fit(self, key, X, y, seed, warm, cadence):
        restarts = self.restarts if warm is None else 1
        hyper = fit_hyperparameters(X, y, restarts=restarts, seed=seed,
                                    warm_start=warm)
        self.last_fit_size[key] = cadence
        return hyper

    def objective_hyper(self, X, y, cadence=None):
        cadence = len(y) if cadence is None else cadence
        if self._want_refit("obj", len(y), cadence):
            self.hyper_obj = self._fit("obj", X, y, self.seed,
                                       self.hyper_obj, cadence)
        return self.hyper_obj

    def constraint_hyper(self, i, X, y, cadence=None):
        cadence = len(y) if cadence is None else cadence
        if self._want_refit(i, len(y), cadence):
            self.hyper_con[i] = self._fit(i, X, y, self.seed + 1 + i,
                                          self.hyper_con[i], cadence)
        return self.hyper_con[i]


def _fallback_hyper(d, y) -> KernelHyper:
    spread = float(np.std(y)) if len(y) else 1.0
    return KernelHyper(spread if spread > 0 else 1.0, np.full(d, 0.3),
                       max(1e-3 * spread, 1e-6))


def _build_models(completed, pending_norm, bank, d, n_constraints):
    """Surrogates + acquisition from the completed records (normalized X).

    Returns (acq callable, objective model on completed feasible only,
    constraint models, f_min or None).
    """
    con_models = []
    for i in range(n_constraints):
        pairs = [(r._xn, _encode_constraint(r.constraint_values[i]))
                 for r in completed
                 if math.isfinite(_encode_constraint(r.constraint_values[i]))]
        if len(pairs) > 200:
            # cap the conditioning set (cubic cost); deterministic thinning
            # keeps global coverage plus the newest observations
            sel = np.linspace(0, len(pairs) - 1, 200).astype(int)
            pairs = [pairs[j] for j in sel]
        Xc = np.array([p[0] for p in pairs]) if pairs else np.empty((0, d))
        yc = np.array([p[1] for p in pairs])
        if len(yc) >= 2 and np.std(yc) > 0:
            hyper = bank.constraint_hyper(i, Xc, yc, cadence=len(completed))
        else:
            hyper = bank.hyper_con[i] or _fallback_hyper(d, yc)
        con_models.append(GpModel(Xc, yc, hyper))

    feas = [r for r in completed if r.feasible]
    if feas:
        Xf = np.array([r._xn for r in feas])
        yf = np.array([r.value for r in feas])
        f_min = float(yf.min())
        hyper = bank.objective_hyper(Xf, yf) if len(yf) >= 2 \
            else _fallback_hyper(d, yf)
        if hyper is None:
            hyper = _fallback_hyper(d, yf)
        obj_model = GpModel(Xf, yf, hyper)
        if len(pending_norm):
            believed = impute_in_flight(obj_model, pending_norm, f_min)
            acq_model = GpModel(np.vstack([Xf, pending_norm]),
                                np.concatenate([yf, believed]), hyper)
        else:
            acq_model = obj_model

        def acq(P):
            mu, var = acq_model.posterior(P)
            ei = expected_improvement(mu, var, f_min)
            if con_models:
                ei = ei * feasibility_weight(con_models, P)
            return ei
    else:
        obj_model = None
        f_min = None

        def acq(P):
            P = np.atleast_2d(P)
            if con_models:
                return feasibility_weight(con_models, P)
            return np.zeros(len(P))  # nothing to go on; flat

    return acq, obj_model, con_models, f_min


def run_parallel_bo(problem: OptimizationProblem, scheduler: str = "virtual",
                    fit_restarts: int = 2) -> BoResult:
    """Optimize per the parallel BO loop; returns the best feasible point.

    scheduler="virtual" replays deterministically (synthetic unit durations);
    scheduler="threads" evaluates concurrently on a real thread pool.
    """
    if scheduler not in ("virtual", "threads"):
        raise ValueError(f"unknown scheduler {scheduler!r}")
    t_start = time.perf_counter()
    d = problem.dim
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    span = np.where(hi > lo, hi - lo, 1.0)
    n_con = len(problem.constraints)

    root = np.random.SeedSequence(problem.seed)
    lhs_seed, acq_seed0, fit_seed = (int(s.generate_state(1)[0] % 2**31)
                                     for s in root.spawn(3))
    bank = _SurrogateBank(n_con, fit_seed, restarts=fit_restarts)

    def evaluate(x):
        t0 = time.perf_counter()
        value = float(problem.objective(x))
        cvals = tuple(c(x) for c in problem.constraints)
        wall = time.perf_counter() - t0
        feasible = math.isfinite(value) and all(_constraint_ok(v)
                                                for v in cvals)
        return value, cvals, feasible, wall

    records: list[EvaluationRecord] = []

    def make_record(x, worker, t_dispatch):
        rec = EvaluationRecord(index=len(records), point=x.copy(),
                               worker=worker, t_dispatch=t_dispatch,
                               t_complete=t_dispatch + 1.0)
        rec._xn = (x - lo) / span
        records.append(rec)
        return rec

    def finish(rec, value, cvals, feasible, wall):
        rec.value = value
        rec.constraint_values = cvals
        rec.feasible = feasible
        rec.wall_time = wall
        rec.status = "completed"

    # ---- seed phase: LHS over the box, all workers busy ----
    sampler = qmc.LatinHypercube(d=d, seed=lhs_seed)
    seeds = lo + sampler.random(problem.n_seed) * (hi - lo)
    seeds = np.clip(seeds, lo, hi)
    for i, pt in enumerate(problem.initial_points):
        seeds[i] = np.clip(np.asarray(pt, dtype=float), lo, hi)

    if scheduler == "threads":
        result = _run_threads(problem, seeds, bank, records, make_record,
                              finish, evaluate, acq_seed0, d, n_con)
    else:
        result = _run_virtual(problem, seeds, bank, records, make_record,
                              finish, evaluate, acq_seed0, d, n_con)
    completed = [r for r in records if r.status == "completed"]
    feas = [r for r in completed if r.feasible]
    if not feas:
        raise NoFeasiblePointError(
            f"no feasible point in {len(completed)} evaluations "
            f"(budget {TOTAL_BUDGET_FACTOR}x{problem.n_total})", completed)

    best = min(feas, key=lambda r: r.value)
    # final surrogate update on completed data only (no believers)
    _, obj_model, con_models, _ = _build_models(
        completed, np.empty((0, d)), bank, d, n_con)
    exhausted = len([r for r in feas]) < problem.n_total
    return BoResult(best_point=best.point.copy(), best_value=best.value,
                    records=completed, n_feasible=len(feas),
                    exhausted=exhausted,
                    wall_time=time.perf_counter() - t_start,
                    objective_model=obj_model, constraint_models=con_models)


def _run_virtual(problem, seeds, bank, records, make_record, finish, evaluate,
                 acq_seed0, d, n_con):
    """Deterministic event-driven loop with unit evaluation durations."""
    P = problem.workers
    worker_free = np.zeros(P)
    hidden = {}  # record index -> evaluation outcome
    total_cap = TOTAL_BUDGET_FACTOR * problem.n_total

    def dispatch(x):
        w = int(np.argmin(worker_free))
        rec = make_record(x, w, float(worker_free[w]))
        hidden[rec.index] = evaluate(x)
        worker_free[w] = rec.t_dispatch + 1.0
        return rec

    def reveal_until(t_now):
        for rec in records:
            if rec.status == "in-flight" and rec.t_complete <= t_now + 1e-12:
                finish(rec, *hidden.pop(rec.index))

    for x in seeds:
        dispatch(x)
    reveal_until(float(worker_free.max()))

    n_prop = 0
    while True:
        completed = [r for r in records if r.status == "completed"]
        in_flight = [r for r in records if r.status == "in-flight"]
        n_feas = sum(r.feasible for r in completed)
        if n_feas >= problem.n_total:
            break
        if len(records) >= total_cap and not in_flight:
            break
        if (n_feas + len(in_flight) >= problem.n_total
                or len(records) >= total_cap):
            # budget optimistically exhausted: wait for a completion, which
            # either finishes the run or (if infeasible) frees budget
            reveal_until(min(r.t_complete for r in in_flight))
            continue
        t_now = float(worker_free.min())
        reveal_until(t_now)
        completed = [r for r in records if r.status == "completed"]
        in_flight = [r for r in records if r.status == "in-flight"]
        pend = np.array([r._xn for r in in_flight]) if in_flight else \
            np.empty((0, d))
        acq, _, _, f_min = _build_models(completed, pend, bank, d, n_con)
        feas_best = min((r for r in completed if r.feasible),
                        default=None, key=lambda r: r.value)
        inc = feas_best._xn if feas_best is not None else None
        xn = maximize_acquisition(acq, np.tile([0.0, 1.0], (d, 1)),
                                  seed=acq_seed0 + n_prop, incumbent=inc)
        n_prop += 1
        x = problem.bounds[:, 0] + xn * (problem.bounds[:, 1]
                                         - problem.bounds[:, 0])
        x = np.clip(x, problem.bounds[:, 0], problem.bounds[:, 1])
        dispatch(x)
        n_done = len([r for r in records if r.status == "completed"])
        logger.info("bo iter %d: %d feasible / %d done, best %s",
                    n_prop, n_feas, n_done,
                    f"{f_min:.4g}" if f_min is not None else "n/a")
    reveal_until(float(worker_free.max()))
    return records


def _run_threads(problem, seeds, bank, records, make_record, finish, evaluate,
                 acq_seed0, d, n_con):
    """Real thread-pool dispatch; same proposal logic, wall-clock timestamps."""
    from concurrent.futures import ThreadPoolExecutor, FIRST_COMPLETED, wait

    total_cap = TOTAL_BUDGET_FACTOR * problem.n_total
    t0 = time.perf_counter()
    n_prop = 0
    with ThreadPoolExecutor(max_workers=problem.workers) as pool:
        futures = {}

        def dispatch(x, worker_hint=0):
            rec = make_record(x, worker_hint, time.perf_counter() - t0)
            fut = pool.submit(evaluate, x)
            futures[fut] = rec

        def collect(block):
            nonlocal futures
            if not futures:
                return
            done, _ = wait(list(futures),
                           return_when=FIRST_COMPLETED if block else None,
                           timeout=None if block else 0)
            for fut in done:
                rec = futures.pop(fut)
                finish(rec, *fut.result())
                rec.t_complete = time.perf_counter() - t0

        for x in seeds:
            while len(futures) >= problem.workers:
                collect(block=True)
            dispatch(x)
        while futures:
            collect(block=True)

        while True:
            completed = [r for r in records if r.status == "completed"]
            n_feas = sum(r.feasible for r in completed)
            if n_feas >= problem.n_total:
                break
            if len(records) >= total_cap and not futures:
                break
            if (n_feas + len(futures) >= problem.n_total
                    or len(records) >= total_cap
                    or len(futures) >= problem.workers):
                collect(block=True)
                continue
            in_flight = [futures[f]._xn for f in futures]
            pend = np.array(in_flight) if in_flight else np.empty((0, d))
            acq, _, _, _ = _build_models(completed, pend, bank, d, n_con)
            feas_best = min((r for r in completed if r.feasible),
                            default=None, key=lambda r: r.value)
            inc = feas_best._xn if feas_best is not None else None
            xn = maximize_acquisition(acq, np.tile([0.0, 1.0], (d, 1)),
                                      seed=acq_seed0 + n_prop, incumbent=inc)
            n_prop += 1
            x = problem.bounds[:, 0] + xn * (problem.bounds[:, 1]
                                             - problem.bounds[:, 0])
            dispatch(np.clip(x, problem.bounds[:, 0], problem.bounds[:, 1]))
        while futures:
            collect(block=True)
    return records


def trace_to_csv(result: BoResult, path) -> None:
    """One row per completed evaluation, deterministic content only."""
    path = Path(path)
    d = len(result.best_point)
    ncon = max((len(r.constraint_values) for r in result.records), default=0)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["index", "status", "worker", "t_dispatch", "t_complete",
                     "value", "feasible"]
                    + [f"c{i}" for i in range(ncon)]
                    + [f"x{i}" for i in range(d)])
        for r in result.records:
            cvals = [repr(float(_encode_constraint(v)))
                     for v in r.constraint_values]
            wr.writerow([r.index, r.status, r.worker,
                         repr(float(r.t_dispatch)), repr(float(r.t_complete)),
                         repr(float(r.value)), int(r.feasible)]
                        + cvals + [repr(float(v)) for v in r.point])

"""Dimensionality reduction of the correction gain.

Three pipelines:

* model-based (MBR): physics-ranked entry classes with a data-range heuristic
  for the tuning bounds, pruned to 12/7/5/3 parameters;
* supervised (SDR): minimize the l1 norm of the normalized gains subject to
  stability and rms upper bounds (structure optimization), then threshold the
  normalized magnitudes and re-optimize the surviving entries;
* unsupervised (UDR): project the output error onto the leading principal
  directions of the measured outputs and tune a reduced-input gain, with a
  conservative interval-arithmetic conversion of the entry bounds.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bo import OptimizationProblem, run_parallel_bo
from .observer import DEFAULT_BOUNDS, STATE_ROWS, GainMatrix, entry_label
from .scenarios import Dataset
from .tuning import MatrixGainSpace, ObserverEvaluator, TuningBudget
from .vehicle import KMH, RAD2DEG, SENSOR_NAMES, VehicleParams

# ---------------------------------------------------------------------------
# Model-based reduction: importance classes and pruning plans
# ---------------------------------------------------------------------------
# Entries as (row, col) into the 4x3 gain laid out rows (vx, wz, wfl, wrr) x
# columns (wz, enc_fl, enc_rr). Class (i): auto-correlated diagonal; (ii):
# wheel speeds -> vx; (iii): cross-wheel; (iv): lateral/longitudinal coupling.
MBR_CLASSES = {
    1: ((1, 0), (2, 1), (3, 2)),
    2: ((0, 1), (0, 2)),
    3: ((2, 2), (3, 1)),
    4: ((0, 0), (1, 1), (1, 2), (2, 0), (3, 0)),
}

MBR_LEVELS = {3: (1,), 5: (1, 2), 7: (1, 2, 3), 12: (1, 2, 3, 4)}


def mbr_class(row: int, col: int) -> int:
    for cls, entries in MBR_CLASSES.items():
        if (row, col) in entries:
            return cls
    raise KeyError((row, col))


def mbr_plan(level: int) -> np.ndarray:
    """Sparsity mask for an importance level in {12, 7, 5, 3}."""
    if level not in MBR_LEVELS:
        raise ValueError(f"level must be one of {sorted(MBR_LEVELS)}")
    mask = np.zeros((4, 3), dtype=bool)
    for cls in MBR_LEVELS[level]:
        for i, j in MBR_CLASSES[cls]:
            mask[i, j] = True
    return mask


# which raw state index / unit factor backs each gain row
_ROW_SERIES = {"vx": (3, KMH), "wz": (5, RAD2DEG), "wfl": (6, 1.0),
               "wrr": (9, 1.0), "wfr": (7, 1.0), "wrl": (8, 1.0)}
_WHEEL_CHANNELS = ("enc_fl", "enc_fr", "enc_rl", "enc_rr")
_CHANNEL_STATE = {"wz": "wz", "enc_fl": "wfl", "enc_fr": "wfr",
                  "enc_rl": "wrl", "enc_rr": "wrr"}


def mbr_ranges(data: Dataset, channels=("wz", "enc_fl", "enc_rr"),
               segments: int = 10) -> np.ndarray:
    """Tuning ranges from the data-range heuristic; (4, n_channels, 2).

    Auto-correlated entries get (0, 1.5) and cross-wheel entries
    (-0.75, 0.75) from the slow-state stability analysis; every other entry
    spans 1.5x the mean per-segment ratio range(state)/range(output),
    centered at zero except the nonnegative wheel-speed -> vx entries.
    """
    out = np.empty((4, len(channels), 2))
    for i, row in enumerate(STATE_ROWS):
        sidx, sunit = _ROW_SERIES[row]
        xs = data.x_meas[:, sidx] * sunit
        for j, ch in enumerate(channels):
            state_of_ch = _CHANNEL_STATE.get(ch)
            ch_wheel = ch in _WHEEL_CHANNELS
            row_wheel = row in ("wfl", "wfr", "wrl", "wrr")
            if state_of_ch == row:
                out[i, j] = (0.0, 1.5)
                continue
            if ch_wheel and row_wheel:
                out[i, j] = (-0.75, 0.75)
                continue
            ys = data.y_meas[:, SENSOR_NAMES.index(ch)]
            ratios = []
            for xc, yc in zip(np.array_split(xs, segments),
                              np.array_split(ys, segments)):
                ry = float(np.ptp(yc))
                if ry == 0.0:
                    warnings.warn(f"zero output range for {ch}; segment skipped")
                    continue
                ratios.append(float(np.ptp(xc)) / ry)
            span = 1.5 * float(np.mean(ratios))
            if row == "vx" and ch_wheel:
                out[i, j] = (0.0, span)
            else:
                out[i, j] = (-0.5 * span, 0.5 * span)
    return out


# ---------------------------------------------------------------------------
# Supervised reduction: normalized magnitudes, structure optimization, pruning
# ---------------------------------------------------------------------------

def normalize_gain(k: float, bounds) -> float:
    """Magnitude of k relative to the bound of its sign, in [0, 1]."""
    lo, hi = float(bounds[0]), float(bounds[1])
    if k > 0.0:
        if hi == 0.0:
            raise ValueError("positive entry with zero upper bound")
        return abs(k / hi)
    if k < 0.0:
        if lo == 0.0:
            raise ValueError("negative entry with zero lower bound")
        return abs(k / lo)
    return 0.0


def l1_of_normalized(entries, bounds, mask=None) -> float:
    """Sum of normalized magnitudes over the active mask."""
    entries = np.asarray(entries, dtype=float)
    bounds = np.asarray(bounds, dtype=float)
    if mask is None:
        mask = np.ones(entries.shape, dtype=bool)
    total = 0.0
    for idx in np.argwhere(np.asarray(mask, dtype=bool)):
        total += normalize_gain(entries[tuple(idx)], bounds[tuple(idx)])
    return total


@dataclass(frozen=True)
class RankedEntry:
    label: str
    row: int
    col: int
    k_tilde: float
    k_raw: float
    klass: str  # "i".."iv" for matrix gains, "pc" for reduced ones


@dataclass
class ParameterRanking:
    """Gain entries ordered by normalized magnitude, descending."""
    entries: list

    def __post_init__(self):
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate entries in ranking")
        self.entries = sorted(self.entries, key=lambda e: -e.k_tilde)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def k_tildes(self) -> np.ndarray:
        return np.array([e.k_tilde for e in self.entries])

    def delta_for_size(self, size: int) -> float:
        """Threshold that keeps exactly `size` entries (midpoint rule)."""
        kt = self.k_tildes()
        if not 1 <= size <= len(kt):
            raise ValueError(f"size must be in [1, {len(kt)}]")
        if size == len(kt):
            return 0.0
        return 0.5 * (kt[size - 1] + kt[size])

    def to_csv(self, path) -> None:
        import csv
        with open(Path(path), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["entry", "k_tilde", "k_raw", "class"])
            for e in self.entries:
                wr.writerow([e.label, repr(float(e.k_tilde)),
                             repr(float(e.k_raw)), e.klass])

    @staticmethod
    def from_csv(path, shape=(4, 3)) -> "ParameterRanking":
        import csv
        entries = []
        labels = {entry_label(i, j): (i, j)
                  for i in range(shape[0]) for j in range(shape[1])}
        with open(Path(path)) as f:
            for rec in csv.DictReader(f):
                row, col = labels.get(rec["entry"], (-1, -1))
                entries.append(RankedEntry(rec["entry"], row, col,
                                           float(rec["k_tilde"]),
                                           float(rec["k_raw"]), rec["class"]))
        return ParameterRanking(entries)


_ROMAN = {1: "i", 2: "ii", 3: "iii", 4: "iv"}


def rank_matrix_gain(K: GainMatrix) -> ParameterRanking:
    entries = []
    for i in range(4):
        for j in range(3):
            if not K.mask[i, j]:
                continue
            entries.append(RankedEntry(
                entry_label(i, j), i, j,
                normalize_gain(K.entries[i, j], K.bounds[i, j]),
                float(K.entries[i, j]), _ROMAN[mbr_class(i, j)]))
    return ParameterRanking(entries)


def prune(ranking: ParameterRanking, delta: float, shape=(4, 3)) -> np.ndarray:
    """Mask keeping entries with normalized magnitude >= delta."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must be in [0, 1]")
    mask = np.zeros(shape, dtype=bool)
    for e in ranking:
        if e.k_tilde >= delta:
            if not (0 <= e.row < shape[0] and 0 <= e.col < shape[1]):
                raise ValueError(f"entry {e.label} has no matrix position")
            mask[e.row, e.col] = True
    if not mask.any():
        raise ValueError(f"delta={delta} prunes every entry; "
                         "the observer would be open loop")
    return mask


def heuristic_seed_gain(space) -> np.ndarray:
    """A modest self-correcting gain: a sensible starting filter.

    Auto-correlated entries at 40% of their upper bound, wheel-speed -> vx
    entries at 30%, everything else zero. Usually feasible, which gives the
    structure optimization an incumbent inside the constrained region.
    """
    vec = np.zeros(space.dim)
    if isinstance(space, MatrixGainSpace):
        positions = space.positions()
        for n, (i, j) in enumerate(positions):
            cls = mbr_class(i, j)
            if cls == 1:
                vec[n] = 0.4 * space.bounds[i, j, 1]
            elif cls == 2:
                vec[n] = 0.3 * space.bounds[i, j, 1]
    return vec


def structure_optimize(data: Dataset, bounds, ub_vx: float, ub_wz: float,
                       budget: TuningBudget, mask=None, space=None,
                       evaluator=None, seed_gain=None,
                       params: VehicleParams = VehicleParams(),
                       vx_offset: float = 2.0, scheduler: str = "virtual"):
    """Minimize the normalized-l1 of the gain under stability + rms bounds.

    Runs the constrained optimizer with the l1 objective and three coupled
    constraints (stability, rms(v_x) < ub_vx, rms(omega_z) < ub_wz); returns
    the sparsest feasible gain found and the importance ranking of its
    entries. Raises if no feasible point exists within the total budget,
    which usually means the upper bounds are too tight for the dataset.

    evaluator defaults to the observer simulation; anything exposing
    stable/rms_vx/rms_wz over gain vectors can stand in. seed_gain (a
    vector over the space, default heuristic_seed_gain) is evaluated first:
    random points rarely satisfy the rms bounds in 12 dimensions, and one
    in-region incumbent lets the acquisition exploit instead of blindly
    hunting feasibility.
    """
    if space is None:
        space = MatrixGainSpace(mask=mask, bounds=bounds)
    ev = evaluator if evaluator is not None else \
        ObserverEvaluator(data, space, params=params, vx_offset=vx_offset)
    bvec = space.bounds_vec

    def objective(vec):
        total = 0.0
        for v, b in zip(vec, bvec):
            total += normalize_gain(float(v), b)
        return total

    if seed_gain is None:
        seed_gain = heuristic_seed_gain(space)

    problem = OptimizationProblem(
        bounds=bvec, objective=objective,
        constraints=[ev.stable,
                     lambda v: ev.rms_vx(v) - ub_vx,
                     lambda v: ev.rms_wz(v) - ub_wz],
        n_total=budget.n_total, n_seed=budget.n_seed,
        workers=budget.workers, seed=budget.seed,
        initial_points=[np.asarray(seed_gain, dtype=float)])
    try:
        result = run_parallel_bo(problem, scheduler=scheduler)
    except Exception as err:
        raise RuntimeError(
            f"structure optimization found no feasible gain: {err}; "
            f"consider larger rms upper bounds than ({ub_vx}, {ub_wz})"
        ) from err

    gain = space.build(result.best_point)
    if isinstance(gain, GainMatrix):
        ranking = rank_matrix_gain(gain)
    else:
        entries = [RankedEntry(space.labels[n], *space.positions()[n],
                               normalize_gain(float(result.best_point[n]),
                                              bvec[n]),
                               float(result.best_point[n]), "pc")
                   for n in range(space.dim)]
        ranking = ParameterRanking(entries)
    return gain, ranking, result


# ---------------------------------------------------------------------------
# Unsupervised reduction: PCA of the measured outputs + bound conversion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReductionMap:
    """Linear feature extraction for output errors.

    directions (orthonormal rows) act on z-scored channels; because the map
    is linear, applying it to errors only needs the 1/scale factors, so
    error_map() = directions @ diag(1/scales).
    """
    directions: np.ndarray
    scales: np.ndarray
    means: np.ndarray
    channels: tuple
    power_fractions: np.ndarray
    retained: float

    def __post_init__(self):
        D = np.asarray(self.directions, dtype=float)
        G = D @ D.T
        if not np.allclose(G, np.eye(len(D)), atol=1e-9):
            raise ValueError("direction rows must be orthonormal")
        if not 0.0 < self.retained <= 1.0 + 1e-12:
            raise ValueError("retained power fraction must be in (0, 1]")
        object.__setattr__(self, "directions", D)

    @property
    def n_components(self) -> int:
        return len(self.directions)

    def error_map(self) -> np.ndarray:
        return self.directions @ np.diag(1.0 / self.scales)

    def to_json(self, path) -> None:
        payload = {"directions": self.directions.tolist(),
                   "scales": self.scales.tolist(),
                   "means": self.means.tolist(),
                   "channels": list(self.channels),
                   "power_fractions": self.power_fractions.tolist(),
                   "retained": self.retained}
        with open(Path(path), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def from_json(path) -> "ReductionMap":
        with open(Path(path)) as f:
            d = json.load(f)
        return ReductionMap(np.array(d["directions"]), np.array(d["scales"]),
                            np.array(d["means"]), tuple(d["channels"]),
                            np.array(d["power_fractions"]), d["retained"])


def pca_reduce(data: Dataset, channels=_WHEEL_CHANNELS,
               target=3) -> ReductionMap:
    """Principal directions of the selected measured-output channels.

    Channels are z-scored first (wheel speeds and yaw rate carry
    incommensurate units). target is a component count or a cumulated power
    fraction in (0, 1).
    """
    idx = [SENSOR_NAMES.index(c) for c in channels]
    Y = data.y_meas[:, idx]
    if len(Y) < 2:
        raise ValueError("need at least 2 samples")
    means = Y.mean(axis=0)
    scales = Y.std(axis=0, ddof=1)
    if np.any(scales == 0.0):
        flat = [channels[i] for i in np.nonzero(scales == 0.0)[0]]
        raise ValueError(f"constant channels cannot be standardized: {flat}")
    Z = (Y - means) / scales
    _, svals, Vt = np.linalg.svd(Z, full_matrices=False)
    power = svals ** 2
    fractions = power / power.sum()
    rank = int(np.sum(svals > 1e-9 * svals[0]))

    if isinstance(target, float) and 0.0 < target < 1.0:
        csum = np.cumsum(fractions)
        k = int(np.searchsorted(csum, target - 1e-12) + 1)
    else:
        k = int(target)
    if not 1 <= k <= len(channels):
        raise ValueError(f"component count {k} out of range")
    if k > rank:
        raise ValueError(f"requested {k} components but the channel matrix "
                         f"has rank {rank}")
    return ReductionMap(directions=Vt[:k], scales=scales, means=means,
                        channels=tuple(channels), power_fractions=fractions,
                        retained=float(np.sum(fractions[:k])))


def convert_bounds(bounds_K, T) -> np.ndarray:
    """Conservative box for the reduced gain under the extraction map T.

    Every reduced gain inside the returned box induces K = K_red @ T with all
    entries inside bounds_K (sufficient, not necessary). Construction: the
    interval image of the original per-row bounds under T^T, sign-clipped
    where an original bound pins an entry at zero, then scaled per row by the
    largest factor keeping the interval-arithmetic worst case inside the
    original box.
    """
    bounds_K = np.asarray(bounds_K, dtype=float)
    T = np.atleast_2d(np.asarray(T, dtype=float))
    n_rows, n_y = bounds_K.shape[0], bounds_K.shape[1]
    if bounds_K.shape != (n_rows, n_y, 2):
        raise ValueError("bounds_K must be (n_rows, n_y, 2)")
    if T.shape[1] != n_y:
        raise ValueError(f"T must have {n_y} columns")
    if np.any(bounds_K[..., 1] - bounds_K[..., 0] <= 0.0):
        raise ValueError("degenerate (zero-width) original bounds")
    k = T.shape[0]
    out = np.empty((n_rows, k, 2))
    for i in range(n_rows):
        lo = bounds_K[i, :, 0]
        hi = bounds_K[i, :, 1]
        prod_lo = lo[None, :] * T       # (k, n_y)
        prod_hi = hi[None, :] * T
        g_lo = np.minimum(prod_lo, prod_hi).sum(axis=1)
        g_hi = np.maximum(prod_lo, prod_hi).sum(axis=1)
        # entries pinned at zero forbid any contribution of the wrong sign
        for j in np.nonzero(lo == 0.0)[0]:
            g_lo[T[:, j] > 0.0] = np.maximum(g_lo[T[:, j] > 0.0], 0.0)
            g_hi[T[:, j] < 0.0] = np.minimum(g_hi[T[:, j] < 0.0], 0.0)
        for j in np.nonzero(hi == 0.0)[0]:
            g_lo[T[:, j] < 0.0] = np.maximum(g_lo[T[:, j] < 0.0], 0.0)
            g_hi[T[:, j] > 0.0] = np.minimum(g_hi[T[:, j] > 0.0], 0.0)
        # largest uniform row scale keeping worst cases inside the box
        m = np.minimum(g_lo[:, None] * T, g_hi[:, None] * T).sum(axis=0)
        M = np.maximum(g_lo[:, None] * T, g_hi[:, None] * T).sum(axis=0)
        s = math.inf
        for j in range(n_y):
            if M[j] > 0.0 and hi[j] > 0.0:
                s = min(s, hi[j] / M[j])
            if m[j] < 0.0 and lo[j] < 0.0:
                s = min(s, lo[j] / m[j])
        if not math.isfinite(s):
            s = 1.0
        out[i, :, 0] = s * g_lo
        out[i, :, 1] = s * g_hi
    return out

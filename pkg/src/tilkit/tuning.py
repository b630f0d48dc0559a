"""Glue between the observer and the optimizer.

A gain space maps a flat optimization vector to a gain object (full matrix
with a sparsity mask, or reduced-input gain); the evaluator runs the observer
once per candidate and serves the loss and every coupled constraint from that
single simulation through a small memo cache, so objective and constraint
callables stay independent functions without re-simulating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .observer import (GainMatrix, ReducedGain, entry_label, evaluate_loss,
                       run_observer)
from .scenarios import Dataset
from .vehicle import VehicleParams


@dataclass(frozen=True)
class TuningBudget:
    """Optimizer budget: feasible evaluations, seed points, workers, seed."""
    n_total: int = 150
    n_seed: int = 50
    workers: int = 2
    seed: int = 0

    def with_seed(self, seed: int) -> "TuningBudget":
        return TuningBudget(self.n_total, self.n_seed, self.workers, seed)


class MatrixGainSpace:
    """Active entries of a masked 4x3 gain matrix, row-major."""

    def __init__(self, mask=None, bounds=None):
        probe = GainMatrix.zeros(mask=mask, bounds=bounds)
        self.mask = probe.mask
        self.bounds = probe.bounds
        self.bounds_vec = probe.active_bounds()
        self.labels = probe.labels()

    @property
    def dim(self) -> int:
        return len(self.bounds_vec)

    def build(self, vec) -> GainMatrix:
        return GainMatrix.from_vector(vec, mask=self.mask, bounds=self.bounds)

    def positions(self):
        return [(i, j) for i in range(4) for j in range(3) if self.mask[i, j]]


class ReducedGainSpace:
    """Entries of a reduced-input gain (4 x n_components), row-major, with
    an optional sparsity mask (masked entries stay zero)."""

    def __init__(self, reduction, bounds_red, mask=None):
        self.reduction = reduction
        self.bounds = np.asarray(bounds_red, dtype=float)
        n_red = reduction.error_map().shape[0]
        if self.bounds.shape != (4, n_red, 2):
            raise ValueError(f"bounds must be (4, {n_red}, 2)")
        self.mask = np.ones((4, n_red), dtype=bool) if mask is None \
            else np.asarray(mask, dtype=bool)
        if self.mask.shape != (4, n_red):
            raise ValueError(f"mask must be (4, {n_red})")
        self.bounds_vec = self.bounds[self.mask]
        self.labels = [f"pc{c + 1}->{row}"
                       for i, row in enumerate(("vx", "wz", "wfl", "wrr"))
                       for c in range(n_red) if self.mask[i, c]]

    @property
    def dim(self) -> int:
        return len(self.bounds_vec)

    def build(self, vec) -> ReducedGain:
        entries = np.zeros(self.mask.shape)
        entries[self.mask] = np.asarray(vec, dtype=float)
        return ReducedGain(entries, self.reduction, bounds=self.bounds)

    def positions(self):
        n_red = self.mask.shape[1]
        return [(i, c) for i in range(4) for c in range(n_red)
                if self.mask[i, c]]


class ObserverEvaluator:
    """Simulation-backed loss and constraints, one observer run per point."""

    def __init__(self, data: Dataset, space,
                 params: VehicleParams = VehicleParams(),
                 vx_offset: float = 2.0):
        self.data = data
        self.space = space
        self.params = params
        self.vx_offset = vx_offset
        self._cache = {}

    def run(self, vec):
        key = np.asarray(vec, dtype=float).tobytes()
        run = self._cache.get(key)
        if run is None:
            gain = self.space.build(vec)
            run = run_observer(self.data, gain, params=self.params,
                               vx_offset=self.vx_offset)
            self._cache[key] = run
        return run

    # problem-facing callables -------------------------------------------
    def loss(self, vec) -> float:
        return evaluate_loss(self.run(vec))

    def stable(self, vec) -> bool:
        return self.run(vec).stable

    def rms_vx(self, vec) -> float:
        return self.run(vec).rmse_vx

    def rms_wz(self, vec) -> float:
        return self.run(vec).rmse_wz

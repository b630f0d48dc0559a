"""Gaussian-process regression with the Matern 5/2 ARD kernel.

Surrogates for both the tuning objective and the coupled constraints.
Models are immutable once conditioned; prediction is reentrant, so a model
can be shared read-only across optimizer workers. Observations are centered
(sample mean subtracted) before conditioning against a zero-mean prior and
the mean is restored on prediction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

SQRT5 = math.sqrt(5.0)

_JITTERS = (0.0, 1e-10, 1e-8)  # escalation ladder for the Gram factorization


@dataclass(frozen=True)
class KernelHyper:
    """Signal std, per-dimension length-scales, observation-noise std."""
    sigma_f: float
    length_scales: np.ndarray
    sigma_n: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if self.sigma_f <= 0.0 or self.sigma_n < 0.0 or np.any(ls <= 0.0):
            raise ValueError("kernel hyperparameters must be positive")
        object.__setattr__(self, "length_scales", ls)

    @property
    def dim(self) -> int:
        return len(self.length_scales)


def _scaled_sqdist(a, b, ls):
    a = np.atleast_2d(a) / ls
    b = np.atleast_2d(b) / ls
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    sq = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def _matern52(r):
    return (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * np.exp(-SQRT5 * r)


def kernel_eval(a, b, h: KernelHyper) -> float:
    """Matern 5/2 covariance with per-dimension (ARD) length-scales."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) != h.dim:
        raise ValueError("inputs must be vectors matching the length-scales")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite kernel inputs")
    r = math.sqrt(float(np.sum(((a - b) / h.length_scales) ** 2)))
    return float(h.sigma_f ** 2 * _matern52(r))


def kernel_matrix(xa, xb, h: KernelHyper) -> np.ndarray:
    r = np.sqrt(_scaled_sqdist(xa, xb, h.length_scales))
    return h.sigma_f ** 2 * _matern52(r)


class GpModel:
    """Zero-mean GP conditioned on (X, y); factorization cached at build."""

    def __init__(self, X, y, hyper: KernelHyper):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if len(y) and X.shape[0] != len(y):
            raise ValueError("X and y lengths differ")
        if len(y) and X.shape[1] != hyper.dim:
            raise ValueError("input dimension != number of length-scales")
        self.X = X
        self.y = y
        self.hyper = hyper
        self.y_mean = float(np.mean(y)) if len(y) else 0.0
        self.jitter = 0.0
        if len(y):
            K = kernel_matrix(X, X, hyper)
            last_err = None
            for jit in _JITTERS:
                try:
                    self._chol = cho_factor(
                        K + (hyper.sigma_n ** 2 + jit) * np.eye(len(y)),
                        lower=True)
                    self.jitter = jit
                    break
                except np.linalg.LinAlgError as err:
                    last_err = err
            else:
                raise np.linalg.LinAlgError(
                    f"Gram matrix not positive definite even with jitter "
                    f"{_JITTERS[-1]}: {last_err}")
            self._alpha = cho_solve(self._chol, y - self.y_mean)
        else:
            self._chol = None
            self._alpha = None

    def __len__(self):
        return len(self.y)

    def posterior(self, query):
        """Posterior (mean, variance) at one or many query points.

        Variance is clamped at 0 (tolerance 1e-12 below).
        """
        query = np.asarray(query, dtype=float)
        single = query.ndim == 1
        Q = np.atleast_2d(query)
        sf2 = self.hyper.sigma_f ** 2
        if self._chol is None:
            mean = np.zeros(len(Q))
            var = np.full(len(Q), sf2)
        else:
            Ks = kernel_matrix(Q, self.X, self.hyper)
            mean = self.y_mean + Ks @ self._alpha
            V = solve_triangular(self._chol[0], Ks.T, lower=True)
            var = sf2 - np.sum(V * V, axis=0)
            var = np.where(var > -1e-12, np.maximum(var, 0.0), var)
            if np.any(var < 0.0):
                var = np.maximum(var, 0.0)
        if single:
            return float(mean[0]), float(var[0])
        return mean, var


def gp_posterior(model: GpModel, query):
    return model.posterior(query)


def log_marginal_likelihood(X, y, h: KernelHyper, grad: bool = False):
    """Log evidence of y under the zero-mean GP prior (no centering).

    With grad=True also returns the gradient with respect to
    (log sigma_f, log l_1..l_d, log sigma_n).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    Kf = kernel_matrix(X, X, h)
    A = Kf + h.sigma_n ** 2 * np.eye(n)
    chol = cho_factor(A, lower=True)
    alpha = cho_solve(chol, y)
    lml = (-0.5 * float(y @ alpha)
           - float(np.sum(np.log(np.diag(chol[0]))))
           - 0.5 * n * math.log(2.0 * math.pi))
    if not grad:
        return lml

    Ainv = cho_solve(chol, np.eye(n))
    W = np.outer(alpha, alpha) - Ainv  # d lml / dK = W / 2

    g = np.empty(2 + h.dim)
    g[0] = float(np.sum(W * Kf))  # 0.5 tr(W * 2 Kf)
    # dK/dlog(l_i) = sf^2 * (5/3)(1 + sqrt5 r) e^{-sqrt5 r} * d_i^2 / l_i^2
    r = np.sqrt(_scaled_sqdist(X, X, h.length_scales))
    base = h.sigma_f ** 2 * (5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)
    for i in range(h.dim):
        d2 = (X[:, i:i + 1] - X[None, :, i]) ** 2 / h.length_scales[i] ** 2
        g[1 + i] = 0.5 * float(np.sum(W * base * d2))
    g[-1] = float(np.trace(W)) * h.sigma_n ** 2
    return lml, g


DEGENERATE_MSG = "degenerate observations (zero spread); returning default hyper"


def _default_hyper(X, y_std) -> KernelHyper:
    ranges = np.ptp(X, axis=0)
    ranges = np.where(ranges > 0.0, ranges, 1.0)
    sf = y_std if y_std > 0.0 else 1.0
    return KernelHyper(sf, 0.5 * ranges, 1e-3 * sf)


def fit_hyperparameters(X, y, restarts: int = 3, seed: int = 0,
                        warm_start: KernelHyper | None = None) -> KernelHyper:
    """Maximize the (centered) log marginal likelihood over bounded logspace.

    Multi-start bounded L-BFGS with analytic gradients; deterministic for a
    given seed. Degenerate data (all y identical) warns and returns the
    prior-default hyperparameters.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 2:
        raise ValueError("need at least 2 observations to fit")
    yc = y - np.mean(y)
    y_std = float(np.std(yc))
    if y_std == 0.0:
        warnings.warn(DEGENERATE_MSG)
        return _default_hyper(X, y_std)

    ranges = np.ptp(X, axis=0)
    ranges = np.where(ranges > 0.0, ranges, 1.0)
    lo = np.log(np.concatenate(([1e-4 * y_std], 1e-3 * ranges, [1e-6 * y_std])))
    hi = np.log(np.concatenate(([1e3 * y_std], 1e3 * ranges, [1.0 * y_std])))

    def unpack(theta):
        t = np.exp(theta)
        return KernelHyper(t[0], t[1:-1], t[-1])

    def objective(theta):
        try:
            lml, g = log_marginal_likelihood(X, yc, unpack(theta), grad=True)
        except np.linalg.LinAlgError:
            return 1e12, np.zeros_like(theta)
        return -lml, -g

    starts = [np.log(np.concatenate(
        ([y_std], 0.5 * ranges, [1e-2 * y_std])))]
    if warm_start is not None:
        starts.append(np.log(np.concatenate(
            ([warm_start.sigma_f], warm_start.length_scales,
             [max(warm_start.sigma_n, 1e-12)]))))
    rng = np.random.default_rng(seed)
    while len(starts) < restarts:
        starts.append(lo + rng.random(len(lo)) * (hi - lo))

    best = None
    best_val = np.inf
    for s0 in starts:
        res = minimize(objective, np.clip(s0, lo, hi), jac=True,
                       method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": 30})
        if res.fun < best_val:
            best_val = res.fun
            best = res.x
    if best is None:  # pragma: no cover - L-BFGS always returns a point
        return _default_hyper(X, y_std)
    return unpack(best)

"""Gaussian-process regression over encoded resource configurations.

Matern 5/2 kernel with per-dimension lengthscales, targets standardized
internally, fixed observation noise, hyperparameters by log marginal
likelihood (coarse grid start followed by bounded L-BFGS-B refinement).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import FitError, MembershipError
from .space import ResourceConfiguration, SearchSpace, _raw_features

DEFAULT_NOISE = 0.1
SQRT5 = np.sqrt(5.0)
JITTERS = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

LENGTHSCALE_BOUNDS = (1e-2, 2e1)
SIGNAL_VARIANCE_BOUNDS = (1e-3, 2e1)
_GRID_LENGTHSCALES = np.geomspace(0.05, 5.0, 7)
_GRID_SIGNAL_VARIANCES = (0.3, 1.0, 3.0)

MEASURE_KINDS = ("cost", "energy", "runtime", "custom")


def encode(config: ResourceConfiguration, space: SearchSpace) -> np.ndarray:
    """Min-max normalized ``[nodes, vcpus/node, mem/node, vcpus, mem]``."""
    if config not in space:
        raise MembershipError(f"{config} is not in the search space")
    raw = np.array(_raw_features(config))
    lo = np.array(space.lower)
    span = np.array(space.upper) - lo
    out = np.zeros_like(raw)
    nz = span > 0
    out[nz] = (raw[nz] - lo[nz]) / span[nz]
    return out


def encode_many(configs: Sequence[ResourceConfiguration], space: SearchSpace) -> np.ndarray:
    if len(configs) == 0:
        return np.zeros((0, space.dimension))
    return np.vstack([encode(c, space) for c in configs])


@dataclass(frozen=True, eq=False)
class ObservationSet:
    points: np.ndarray
    targets: np.ndarray
    measure: str = "custom"

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        targets = np.asarray(self.targets, dtype=float).ravel()
        if points.shape[0] != targets.shape[0]:
            raise ValueError(f"{points.shape[0]} points but {targets.shape[0]} targets")
        if not np.all(np.isfinite(targets)):
            raise ValueError("targets must be finite")
        if self.measure not in MEASURE_KINDS:
            raise ValueError(f"unknown measure kind {self.measure!r}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return self.targets.shape[0]

    def without(self, j: int) -> "ObservationSet":
        keep = np.arange(len(self)) != j
        return ObservationSet(self.points[keep], self.targets[keep], self.measure)


def matern52(x1: np.ndarray, x2: np.ndarray, lengthscales, signal_variance: float) -> np.ndarray:
    r = _scaled_distance(x1, x2, np.asarray(lengthscales, dtype=float))
    return signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


def _scaled_distance(x1, x2, lengthscales):
    diff = (x1[:, None, :] - x2[None, :, :]) / lengthscales
    return np.sqrt(np.maximum(np.sum(diff * diff, axis=-1), 0.0))


def _cholesky(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    eye = np.eye(n)
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(matrix + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise FitError("kernel matrix is singular after jitter escalation to 1e-4")


def draw_gaussian(mean, cov, loc, scale, count, seed) -> np.ndarray:
    """Draws from N(mean, cov) given in standardized units, mapped by loc/scale."""
    if count < 1:
        raise ValueError("count must be >= 1")
    L = _cholesky(cov)
    z = np.random.default_rng(seed).standard_normal((count, mean.shape[0]))
    return loc + scale * (mean + z @ L.T)


def standardization(targets: np.ndarray) -> tuple[float, float]:
    """Mean and scale used to standardize ``targets``.

    A degenerate spread (single point or constant targets) falls back to the
    magnitude of the mean so predictions stay in the data's scale.
    """
    mean = float(np.mean(targets))
    std = float(np.std(targets, ddof=1)) if targets.size > 1 else 0.0
    if std <= 1e-12 * max(1.0, abs(mean)):
        std = abs(mean) if abs(mean) > 0 else 1.0
    return mean, std


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """A fitted GP posterior. Immutable; predictions in original target units."""

    training_data: ObservationSet
    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float
    target_mean: float
    target_std: float
    _chol: np.ndarray = field(init=False, repr=False)
    _alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = self.training_data.points
        y = (self.training_data.targets - self.target_mean) / self.target_std
        K = matern52(X, X, self.lengthscales, self.signal_variance)
        K[np.diag_indices_from(K)] += self.noise_variance
        L = _cholesky(K)
        object.__setattr__(self, "_chol", L)
        object.__setattr__(self, "_alpha", cho_solve((L, True), y))

    @property
    def dimension(self) -> int:
        return self.training_data.points.shape[1]

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dimension:
            raise ValueError(f"expected {self.dimension} features, got {X.shape[1]}")
        return X

    def standardized_posterior(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and variance in standardized units."""
        X = self._check(X)
        Ks = matern52(X, self.training_data.points, self.lengthscales, self.signal_variance)
        mean = Ks @ self._alpha
        v = solve_triangular(self._chol, Ks.T, lower=True)
        var = self.signal_variance - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def posterior(self, X) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.standardized_posterior(X)
        return self.target_mean + self.target_std * mean, var * self.target_std**2

    def standardized_joint(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = self._check(X)
        Ks = matern52(X, self.training_data.points, self.lengthscales, self.signal_variance)
        Kss = matern52(X, X, self.lengthscales, self.signal_variance)
        v = solve_triangular(self._chol, Ks.T, lower=True)
        cov = Kss - v.T @ v
        return Ks @ self._alpha, 0.5 * (cov + cov.T)

    def sample(self, X, count: int, seed) -> np.ndarray:
        """Joint posterior draws, shape ``(count, len(X))``, original units."""
        mean, cov = self.standardized_joint(X)
        return draw_gaussian(mean, cov, self.target_mean, self.target_std, count, seed)

    def condition_on(self, data: ObservationSet) -> "SurrogateModel":
        """Same hyperparameters and standardization, different training data."""
        return SurrogateModel(
            data,
            self.signal_variance,
            self.lengthscales,
            self.noise_variance,
            self.target_mean,
            self.target_std,
        )


def log_marginal_likelihood(X, y, lengthscales, signal_variance, noise_variance, grad=False):
    """LML of standardized targets; with ``grad`` also d/d(log params)."""
    n, d = X.shape
    lengthscales = np.asarray(lengthscales, dtype=float)
    diff = (X[:, None, :] - X[None, :, :]) / lengthscales
    sq = diff * diff
    r = np.sqrt(np.sum(sq, axis=-1))
    e = np.exp(-SQRT5 * r)
    Kf = signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    K = Kf + (noise_variance + JITTERS[0]) * np.eye(n)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return (-np.inf, np.zeros(d + 1)) if grad else -np.inf
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    if not grad:
        return lml
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    common = signal_variance * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e
    g = np.empty(d + 1)
    for k in range(d):
        g[k] = 0.5 * np.sum(W * common * sq[:, :, k])
    g[d] = 0.5 * np.sum(W * Kf)
    return lml, g


def _optimize_hyperparameters(X, y, noise_variance):
    d = X.shape[1]
    best = None
    for ls in _GRID_LENGTHSCALES:
        for sv in _GRID_SIGNAL_VARIANCES:
            val = log_marginal_likelihood(X, y, np.full(d, ls), sv, noise_variance)
            if best is None or val > best[0]:
                best = (val, ls, sv)
    _, ls0, sv0 = best
    theta0 = np.log(np.r_[np.full(d, ls0), sv0])
    bounds = [tuple(np.log(LENGTHSCALE_BOUNDS))] * d + [tuple(np.log(SIGNAL_VARIANCE_BOUNDS))]

    def objective(theta):
        val, g = log_marginal_likelihood(
            X, y, np.exp(theta[:d]), np.exp(theta[d]), noise_variance, grad=True
        )
        if not np.isfinite(val):
            return 1e10, np.zeros_like(theta)
        return -val, -g

    res = minimize(
        objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": 60}
    )
    theta = res.x if np.isfinite(res.fun) and res.fun <= objective(theta0)[0] else theta0
    return np.exp(theta[:d]), float(np.exp(theta[d]))


@functools.lru_cache(maxsize=8192)
def _fit_cached(xbytes, shape, ybytes, measure, noise_variance):
    X = np.frombuffer(xbytes).reshape(shape)
    y = np.frombuffer(ybytes)
    data = ObservationSet(X.copy(), y.copy(), measure)
    mean, std = standardization(data.targets)
    ys = (data.targets - mean) / std
    if len(data) == 1:
        lengthscales, sv = np.full(shape[1], 1.0), 1.0
    else:
        lengthscales, sv = _optimize_hyperparameters(data.points, ys, noise_variance)
    return SurrogateModel(data, sv, lengthscales, noise_variance, mean, std)


def fit(data: ObservationSet, noise_variance: float = DEFAULT_NOISE) -> SurrogateModel:
    if len(data) < 1:
        raise ValueError("cannot fit a surrogate on an empty observation set")
    if noise_variance < 0:
        raise ValueError("noise_variance must be >= 0")
    X = np.ascontiguousarray(data.points, dtype=float)
    y = np.ascontiguousarray(data.targets, dtype=float)
    return _fit_cached(X.tobytes(), X.shape, y.tobytes(), data.measure, float(noise_variance))


def posterior(model: SurrogateModel, x) -> tuple[float, float]:
    mean, var = model.posterior(np.atleast_2d(x))
    return float(mean[0]), float(var[0])


def sample_posterior(model: SurrogateModel, xs, count: int, seed) -> np.ndarray:
    return model.sample(np.atleast_2d(xs), count, seed)

"""Ranking-weighted Gaussian-process ensemble (RGPE)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .surrogate import ObservationSet, SurrogateModel, draw_gaussian

DEFAULT_SAMPLE_COUNT = 256
DISCARD_PERCENTILE = 95.0


def ranking_loss(predictions, targets) -> np.ndarray | int:
    """Number of misranked ordered pairs.

    ``predictions`` may carry leading batch dimensions (e.g. one row per
    posterior sample); the last axis must match ``targets``.
    """
    pred = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if pred.shape[-1] != y.shape[-1]:
        raise ValueError("predictions and targets differ in length")
    pred_lt = pred[..., :, None] < pred[..., None, :]
    y_lt = y[:, None] < y[None, :]
    loss = np.sum(pred_lt ^ y_lt, axis=(-2, -1))
    return int(loss) if np.ndim(loss) == 0 else loss


def _loo_samples(target: SurrogateModel, data: ObservationSet, count: int, rng) -> np.ndarray:
    n = len(data)
    means = np.empty(n)
    variances = np.empty(n)
    for j in range(n):
        loo = target.condition_on(data.without(j))
        m, v = loo.posterior(data.points[j : j + 1])
        means[j], variances[j] = m[0], v[0]
    return means + np.sqrt(variances) * rng.standard_normal((count, n))


def sampled_losses(
    target: SurrogateModel,
    supports: Sequence[SurrogateModel],
    target_data: ObservationSet,
    sample_count: int = DEFAULT_SAMPLE_COUNT,
    seed=0,
) -> np.ndarray:
    """Ranking-loss samples, shape ``(1 + len(supports), sample_count)``.

    Row 0 is the target, scored on leave-one-out posterior draws; support rows
    are scored on joint posterior draws at the target's observed points.
    """
    n = len(target_data)
    members = 1 + len(supports)
    if n < 2:
        return np.zeros((members, sample_count), dtype=int)
    seeds = np.random.SeedSequence(seed).spawn(members)
    losses = np.empty((members, sample_count), dtype=int)
    target_draws = _loo_samples(target, target_data, sample_count, np.random.default_rng(seeds[0]))
    losses[0] = ranking_loss(target_draws, target_data.targets)
    for i, support in enumerate(supports, start=1):
        draws = support.sample(target_data.points, sample_count, seeds[i])
        losses[i] = ranking_loss(draws, target_data.targets)
    return losses


def weights_from_losses(losses: np.ndarray) -> np.ndarray:
    """Average argmin credit with ties split evenly.

    Per sample, supports whose loss exceeds the target's 95th-percentile loss
    are discarded before the argmin (weight-dilution guard).
    """
    losses = np.asarray(losses)
    threshold = np.percentile(losses[0], DISCARD_PERCENTILE)
    active = losses <= threshold
    active[0] = True
    masked = np.where(active, losses, np.iinfo(np.int64).max)
    best = masked.min(axis=0)
    winners = masked == best
    credit = winners / winners.sum(axis=0)
    weights = credit.mean(axis=1)
    return weights / weights.sum()


def compute_weights(
    target: SurrogateModel,
    supports: Sequence[SurrogateModel],
    target_data: ObservationSet,
    sample_count: int = DEFAULT_SAMPLE_COUNT,
    seed=0,
) -> np.ndarray:
    """RGPE weights ordered ``(target, *supports)``."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if len(target_data) < 1:
        raise ValueError("target data must hold at least one observation")
    if not supports:
        return np.array([1.0])
    return weights_from_losses(sampled_losses(target, supports, target_data, sample_count, seed))


def combine(means, variances, weights) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``sum a_i mu_i`` and variance ``sum a_i^2 sigma_i^2`` over axis 0."""
    a = np.asarray(weights, dtype=float)[:, None]
    return np.sum(a * np.asarray(means), axis=0), np.sum(a * a * np.asarray(variances), axis=0)


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    """Weighted GP ensemble; member 0 is the target model.

    Every member's prediction is first re-expressed in the target's
    standardized scale, then mixed; the result maps back to original units
    with the target's standardization. Mixing in a common scale keeps a
    support's absolute level, which is what lets it place the target's
    optimum before the target has seen more than one run.
    """

    members: tuple[SurrogateModel, ...]
    weights: np.ndarray

    def __post_init__(self):
        members = tuple(self.members)
        weights = np.asarray(self.weights, dtype=float)
        if len(members) != weights.shape[0] or not members:
            raise ValueError("need one weight per member")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be a probability vector, got {weights}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights)

    @property
    def target(self) -> SurrogateModel:
        return self.members[0]

    @property
    def target_mean(self) -> float:
        return self.target.target_mean

    @property
    def target_std(self) -> float:
        return self.target.target_std

    def standardized_posterior(self, X) -> tuple[np.ndarray, np.ndarray]:
        parts = [self._common(*m.standardized_posterior(X), m) for m in self.members]
        return combine([p[0] for p in parts], [p[1] for p in parts], self.weights)

    def _common(self, mean, cov, member):
        """Re-express a member's standardized output in the target's scale."""
        if member is self.target:
            return mean, cov
        ratio = member.target_std / self.target_std
        return (member.target_mean - self.target_mean) / self.target_std + ratio * mean, ratio**2 * cov

    def posterior(self, X) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.standardized_posterior(X)
        return self.target_mean + self.target_std * mean, var * self.target_std**2

    def standardized_joint(self, X) -> tuple[np.ndarray, np.ndarray]:
        parts = [self._common(*m.standardized_joint(X), m) for m in self.members]
        a = self.weights
        mean = sum(w * p[0] for w, p in zip(a, parts))
        cov = sum(w * w * p[1] for w, p in zip(a, parts))
        return mean, cov

    def sample(self, X, count: int, seed) -> np.ndarray:
        mean, cov = self.standardized_joint(X)
        return draw_gaussian(mean, cov, self.target_mean, self.target_std, count, seed)


def ensemble_posterior(ensemble: EnsembleModel, x) -> tuple[float, float]:
    mean, var = ensemble.posterior(np.atleast_2d(x))
    return float(mean[0]), float(var[0])

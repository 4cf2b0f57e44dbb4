"""Acquisition functions over a discrete candidate set (minimization).

Model handles are anything exposing ``posterior(X) -> (mean, var)`` in
original units: fitted surrogates and ensembles both qualify.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

SIGMA_FLOOR = 1e-12
DEFAULT_EHVI_SAMPLES = 128
REFERENCE_MARGIN = 1.1


def ei_from_moments(mean, std, best) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    gap = best - mean
    safe = np.where(std < SIGMA_FLOOR, 1.0, std)
    z = gap / safe
    ei = gap * norm.cdf(z) + safe * norm.pdf(z)
    ei = np.where(std < SIGMA_FLOOR, np.maximum(gap, 0.0), ei)
    return np.maximum(ei, 0.0)


def expected_improvement(model, X, best: float) -> np.ndarray:
    mean, var = model.posterior(X)
    return ei_from_moments(mean, np.sqrt(var), best)


def pof_from_moments(mean, std, bound) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    safe = np.where(std < SIGMA_FLOOR, 1.0, std)
    p = norm.cdf((bound - mean) / safe)
    return np.where(std < SIGMA_FLOOR, (mean <= bound).astype(float), p)


def probability_of_feasibility(model, X, bound: float) -> np.ndarray:
    mean, var = model.posterior(X)
    return pof_from_moments(mean, np.sqrt(var), bound)


@dataclass
class AcquisitionContext:
    objective_models: Sequence
    constraint_models: Sequence = ()
    constraint_bounds: Sequence[float] = ()
    best_feasible: Optional[Sequence[float]] = None
    reference_point: Optional[np.ndarray] = None
    front: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if len(self.constraint_models) != len(self.constraint_bounds):
            raise ValueError("one bound per constraint model is required")


def feasibility(ctx: AcquisitionContext, X) -> np.ndarray:
    X = np.atleast_2d(X)
    p = np.ones(X.shape[0])
    for model, bound in zip(ctx.constraint_models, ctx.constraint_bounds):
        p = p * probability_of_feasibility(model, X, bound)
    return p


def constrained_score(ctx: AcquisitionContext, X) -> np.ndarray:
    """EI times the product of constraint feasibilities.

    Without any feasible observation the score is the feasibility alone.
    """
    pof = feasibility(ctx, X)
    if ctx.best_feasible is None:
        return pof
    return expected_improvement(ctx.objective_models[0], np.atleast_2d(X), ctx.best_feasible[0]) * pof


def _pareto_staircase(points: np.ndarray, ref: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pts = pts[np.all(pts < ref, axis=1)]
    if pts.shape[0] == 0:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    keep = pts[:, 1] < np.minimum.accumulate(np.r_[np.inf, pts[:-1, 1]])
    return pts[keep]


def hypervolume_2d(points, ref) -> float:
    """Area dominated by ``points`` and bounded by ``ref`` (both minimized)."""
    ref = np.asarray(ref, dtype=float)
    front = _pareto_staircase(points, ref)
    if front.shape[0] == 0:
        return 0.0
    x_next = np.r_[front[1:, 0], ref[0]]
    return float(np.sum((x_next - front[:, 0]) * (ref[1] - front[:, 1])))


def hypervolume_improvement(front, candidates, ref) -> np.ndarray:
    """HV gain of adding each candidate point (rows of ``candidates``) to ``front``."""
    ref = np.asarray(ref, dtype=float)
    P = np.asarray(candidates, dtype=float).reshape(-1, 2)
    box = np.clip(ref[0] - P[:, 0], 0, None) * np.clip(ref[1] - P[:, 1], 0, None)
    F = _pareto_staircase(front, ref)
    if F.shape[0] == 0:
        return box
    qx = np.minimum(np.maximum(P[:, :1], F[None, :, 0]), ref[0])
    qy = np.minimum(np.maximum(P[:, 1:], F[None, :, 1]), ref[1])
    x_next = np.concatenate([qx[:, 1:], np.full((P.shape[0], 1), ref[0])], axis=1)
    overlap = np.sum((x_next - qx) * (ref[1] - qy), axis=1)
    return np.clip(box - overlap, 0.0, None)


def reference_point(front: np.ndarray) -> np.ndarray:
    """Component-wise worst observed feasible value times 1.1."""
    return np.max(np.asarray(front, dtype=float).reshape(-1, 2), axis=0) * REFERENCE_MARGIN


def mc_ehvi(ctx: AcquisitionContext, X, sample_count: int = DEFAULT_EHVI_SAMPLES, seed=0) -> np.ndarray:
    """Monte-Carlo expected hypervolume improvement with sampled feasibility.

    Draws use common random numbers across candidates, so a candidate's value
    does not depend on the rest of the candidate list.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if len(ctx.objective_models) != 2:
        raise ValueError("mc_ehvi supports exactly two objectives")
    if ctx.reference_point is None:
        raise ValueError("reference point is required")
    X = np.atleast_2d(X)
    n = X.shape[0]
    models = list(ctx.objective_models) + list(ctx.constraint_models)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(models))]
    draws = []
    for model, rng in zip(models, rngs):
        mean, var = model.posterior(X)
        z = rng.standard_normal((sample_count, 1))
        draws.append(mean[None, :] + np.sqrt(var)[None, :] * z)
    obj = np.stack(draws[:2], axis=-1).reshape(-1, 2)
    gain = hypervolume_improvement(ctx.front, obj, ctx.reference_point).reshape(sample_count, n)
    for d, bound in zip(draws[2:], ctx.constraint_bounds):
        gain = gain * (d <= bound)
    return gain.mean(axis=0)

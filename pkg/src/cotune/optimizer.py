"""The profiling loop: propose, observe, stop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import acquisition as acq
from .ensemble import DEFAULT_SAMPLE_COUNT, EnsembleModel, compute_weights
from .errors import InputError
from .repository import MIN_SUPPORT_RUNS, Repository, RunRecord, select_support
from .space import ResourceConfiguration, SearchSpace
from .surrogate import DEFAULT_NOISE, ObservationSet, SurrogateModel, encode_many, fit

log = logging.getLogger(__name__)

RANDOM_INIT = "randomInit"
MODEL_GUIDED = "modelGuided"
BELOW_THRESHOLD = "acquisitionBelowThreshold"
BUDGET_EXHAUSTED = "budgetExhausted"
SPACE_EXHAUSTED = "spaceExhausted"

BASELINE_INIT_RUNS = 3
TRANSFER_INIT_RUNS = 1
WEIGHT_FLOOR = 0.05

OBJECTIVE_KINDS = ("cost", "energy")


@dataclass
class Budget:
    max_runs: int = 20
    min_runs: int = 6
    ei_stop_fraction: float = 0.10


@dataclass(frozen=True)
class Constraint:
    bound: float
    measure: str = "runtime"


@dataclass
class Proposal:
    config: Optional[ResourceConfiguration]
    score: float
    kind: str
    should_stop: bool = False
    stop_reason: Optional[str] = None

    def __post_init__(self):
        if self.should_stop and self.stop_reason is None:
            raise ValueError("a stopping proposal needs a reason")


@dataclass
class ProfilingSession:
    """State of one workload's search. ``support_ids`` pins the support pool
    (bypassing similarity selection); otherwise supports come from the store.
    """

    workload_id: str
    space: SearchSpace
    objectives: tuple[str, ...] = ("cost",)
    constraints: tuple[Constraint, ...] = ()
    history: list[RunRecord] = field(default_factory=list)
    budget: Budget = field(default_factory=Budget)
    support_count: int = 3
    rng_seed: int = 0
    noise_variance: float = DEFAULT_NOISE
    weight_samples: int = DEFAULT_SAMPLE_COUNT
    ehvi_samples: int = acq.DEFAULT_EHVI_SAMPLES
    support_ids: Optional[Sequence[str]] = None
    last_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.objectives = tuple(self.objectives)
        self.constraints = tuple(self.constraints)
        if not 1 <= len(self.objectives) <= 2 or any(o not in OBJECTIVE_KINDS for o in self.objectives):
            raise InputError(f"objectives must be 1 or 2 of {OBJECTIVE_KINDS}, got {self.objectives}")
        if self.budget.min_runs > self.budget.max_runs:
            raise InputError("min_runs must not exceed max_runs")

    @property
    def profiled(self) -> set:
        return {r.config.key for r in self.history}

    def is_feasible(self, record: RunRecord) -> bool:
        return all(record.measures.get(c.measure) <= c.bound for c in self.constraints)

    def feasible_history(self) -> list[RunRecord]:
        return [r for r in self.history if self.is_feasible(r)]

    def best_feasible(self) -> Optional[tuple[float, ...]]:
        """Per-objective minimum over feasible runs, None before the first one."""
        feasible = self.feasible_history()
        if not feasible:
            return None
        return tuple(min(r.measures.get(o) for r in feasible) for o in self.objectives)

    def front(self) -> np.ndarray:
        pts = [[r.measures.get(o) for o in self.objectives] for r in self.feasible_history()]
        return np.array(pts, dtype=float).reshape(-1, len(self.objectives))

    def _seed(self, *tags: int) -> list[int]:
        return [self.rng_seed, len(self.history), *tags]


def _observations(records: Sequence[RunRecord], space: SearchSpace, measure: str) -> ObservationSet:
    records = [r for r in records if r.config in space]
    X = encode_many([r.config for r in records], space)
    y = np.array([r.measures.get(measure) for r in records], dtype=float)
    return ObservationSet(X, y, measure)


def _support_pool(session: ProfilingSession, store: Optional[Repository]) -> list[str]:
    if store is None or session.support_count <= 0:
        return []
    if session.support_ids is not None:
        ids = [w for w in session.support_ids if w in store and w != session.workload_id]
        return [w for w in ids if len(store.runs(w)) >= MIN_SUPPORT_RUNS][: session.support_count]
    chosen = select_support(
        session.workload_id, store, session.support_count, target_runs=session.history
    )
    return [c.workload_id for c in chosen]


def build_models(session: ProfilingSession, store: Optional[Repository], use_transfer: bool) -> dict:
    """One model handle per objective and constraint measure."""
    measures = list(dict.fromkeys([*session.objectives, *(c.measure for c in session.constraints)]))
    support_ids = _support_pool(session, store) if use_transfer else []
    models = {}
    session.last_weights = {}
    for mi, measure in enumerate(measures):
        data = _observations(session.history, session.space, measure)
        target = fit(data, session.noise_variance)
        supports = []
        for wid in support_ids:
            sdata = _observations(store.runs(wid), session.space, measure)
            if len(sdata) >= MIN_SUPPORT_RUNS:
                supports.append((wid, fit(sdata, session.noise_variance)))
        models[measure] = _ensemble_or_target(session, target, supports, data, mi)
    return models


def _ensemble_or_target(session, target: SurrogateModel, supports, data, measure_index):
    if not supports:
        session.last_weights[data.measure] = {session.workload_id: 1.0}
        return target
    weights = compute_weights(
        target,
        [m for _, m in supports],
        data,
        session.weight_samples,
        session._seed(1, measure_index),
    )
    session.last_weights[data.measure] = dict(
        zip([session.workload_id] + [w for w, _ in supports], map(float, weights))
    )
    # weight-dilution guard: supports below the floor are dropped
    keep = [i for i in range(1, len(weights)) if weights[i] >= WEIGHT_FLOOR]
    if not keep:
        return target
    idx = [0] + keep
    w = weights[idx] / weights[idx].sum()
    members = [target] + [supports[i - 1][1] for i in keep]
    return EnsembleModel(tuple(members), w)


def acquisition_values(session: ProfilingSession, models: dict, candidates) -> tuple[np.ndarray, float]:
    """Scores over ``candidates`` and the reference value for the stopping rule."""
    X = encode_many(candidates, session.space)
    ctx = acq.AcquisitionContext(
        objective_models=[models[o] for o in session.objectives],
        constraint_models=[models[c.measure] for c in session.constraints],
        constraint_bounds=[c.bound for c in session.constraints],
        best_feasible=session.best_feasible(),
    )
    if len(session.objectives) == 1:
        scores = acq.constrained_score(ctx, X)
        reference = ctx.best_feasible[0] if ctx.best_feasible else np.nan
        return scores, reference
    if ctx.best_feasible is None:
        return acq.feasibility(ctx, X), np.nan
    ctx.front = session.front()
    ctx.reference_point = acq.reference_point(ctx.front)
    scores = acq.mc_ehvi(ctx, X, session.ehvi_samples, session._seed(2))
    return scores, acq.hypervolume_2d(ctx.front, ctx.reference_point)


def _random_pick(session: ProfilingSession) -> ResourceConfiguration:
    order = np.random.default_rng(session.rng_seed).permutation(len(session.space))
    profiled = session.profiled
    for i in order:
        c = session.space.configurations[i]
        if c.key not in profiled:
            return c
    raise AssertionError("no unprofiled configuration")


def propose(session: ProfilingSession, store: Optional[Repository], use_transfer: bool) -> Proposal:
    if len(session.history) >= session.budget.max_runs:
        return Proposal(None, 0.0, MODEL_GUIDED, True, BUDGET_EXHAUSTED)
    profiled = session.profiled
    candidates = [c for c in session.space if c.key not in profiled]
    if not candidates:
        return Proposal(None, 0.0, MODEL_GUIDED, True, SPACE_EXHAUSTED)

    init_runs = TRANSFER_INIT_RUNS if use_transfer else BASELINE_INIT_RUNS
    if len(session.history) < init_runs:
        return Proposal(_random_pick(session), 0.0, RANDOM_INIT)

    models = build_models(session, store, use_transfer)
    scores, reference = acquisition_values(session, models, candidates)
    means, _ = models[session.objectives[0]].posterior(encode_many(candidates, session.space))
    ordinals = [session.space.ordinal(c) for c in candidates]
    best = np.lexsort((ordinals, means, -scores))[0]
    score = float(scores[best])
    stop = (
        len(session.history) >= session.budget.min_runs
        and np.isfinite(reference)
        and score <= session.budget.ei_stop_fraction * reference
    )
    return Proposal(candidates[best], score, MODEL_GUIDED, bool(stop), BELOW_THRESHOLD if stop else None)


def observe(
    session: ProfilingSession,
    config: ResourceConfiguration,
    record: RunRecord,
    store: Optional[Repository] = None,
) -> ProfilingSession:
    """Append the run to the history and to the shared store.

    Infeasible runs are kept: they train every model like any other run.
    """
    session.space.ordinal(config)
    if config.key in session.profiled:
        raise InputError(f"{config} was already profiled in this session")
    if record.config.key != config.key:
        raise InputError(f"record is for {record.config}, not {config}")
    record = replace(record, workload_id=session.workload_id, sequence=len(session.history) + 1)
    session.history.append(record)
    if store is not None:
        store.append(record)
    return session


@dataclass
class SessionResult:
    history: list[RunRecord]
    best_feasible: Optional[tuple[float, ...]]
    best_feasible_trace: list[Optional[tuple[float, ...]]]
    stopped_at: int
    stop_reason: str
    proposals: list[Proposal] = field(default_factory=list)


def run_session(
    black_box: Callable[[ResourceConfiguration], RunRecord],
    session: ProfilingSession,
    store: Optional[Repository] = None,
    use_transfer: bool = True,
    exhaust: bool = False,
) -> SessionResult:
    """Profile until the stop rule fires.

    With ``exhaust`` the loop keeps going until the budget or the space runs
    out (as repository-building sessions do); ``stopped_at`` and
    ``stop_reason`` still report where the stop rule first fired.
    """
    trace, proposals = [], []
    first_stop = None
    while True:
        proposal = propose(session, store, use_transfer)
        proposals.append(proposal)
        if proposal.should_stop and first_stop is None:
            first_stop = (len(session.history), proposal.stop_reason)
        if proposal.should_stop and (not exhaust or proposal.config is None):
            break
        observe(session, proposal.config, black_box(proposal.config), store)
        trace.append(session.best_feasible())
        log.debug("%s run %d: %s (%s, %.4g)", session.workload_id, len(session.history),
                  proposal.config, proposal.kind, proposal.score)
    return SessionResult(
        history=list(session.history),
        best_feasible=session.best_feasible(),
        best_feasible_trace=trace,
        stopped_at=first_stop[0],
        stop_reason=first_stop[1],
        proposals=proposals,
    )

"""Schedule search: steer clouds (or ensembles sharing one control) between orbits.

The search is heuristic.  Leg counts grow ``m0, m0 + 2, ...``; the field
pattern cycles through the tuple; durations are tuned from several seeded
starts by a local method:

* ``"least-squares"`` (default): bounded trust-region Gauss-Newton on the
  residual vector ``final - matched target`` with a finite-difference
  Jacobian.  Only schedule evaluations are used, each counted once.
* ``"nelder-mead"``: bounded simplex on the scalar objective, followed by
  single-leg sign flips.

Both work on signed durations ``x`` (leg runs with sign ``sign(x)`` for
``|x|``): reversing a leg is the same flow run backwards, so the objective
stays continuous when a duration passes through zero.  The objective is the
sum of orbit distances at the final time, so the result only has to match
targets up to relabeling unless ``labeled`` is set.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .errors import ConfigurationError, DivergenceError, PreconditionError
from .flow_engine import DEFAULT_BOUND, DEFAULT_STEP, Leg, Schedule, final_state, run_schedule
from .group_action import FiniteGroupAction, as_points, orbit_distance, orbit_match, same_stratum, stratum_signature

log = logging.getLogger(__name__)

METHODS = ("least-squares", "nelder-mead")


@dataclass(frozen=True)
class SteeringOptions:
    min_legs: int | None = None
    max_legs: int = 12
    restarts: int = 4
    budget: int = 20_000
    step: float = DEFAULT_STEP
    seed: int = 0
    tolerance: float = 1e-2
    t_max: float = 10.0
    init_duration: float = 1.0
    labeled: bool = False
    threads: int = 1
    bound: float = DEFAULT_BOUND
    restart_budget: int | None = None
    method: str = "least-squares"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {', '.join(METHODS)}")
        if self.max_legs < 1 or (self.min_legs is not None and not 1 <= self.min_legs <= self.max_legs):
            raise ConfigurationError("need 1 <= min_legs <= max_legs")
        if self.restarts < 1 or self.budget < 1:
            raise ConfigurationError("restarts and budget must be positive")
        if self.step <= 0 or self.t_max <= 0 or self.init_duration <= 0:
            raise ConfigurationError("step, t_max and init_duration must be positive")
        if self.tolerance < 0:
            raise ConfigurationError("tolerance must be >= 0")


def _cloud_list(clouds) -> list:
    """A single cloud (array or nested rows of numbers) or a list of clouds."""
    if isinstance(clouds, np.ndarray):
        return [clouds] if clouds.ndim <= 2 else list(clouds)
    if isinstance(clouds, (list, tuple)) and clouds and isinstance(clouds[0], np.ndarray):
        return list(clouds)
    try:
        arr = np.asarray(clouds, dtype=np.float64)
    except ValueError:
        # ragged: clouds with different point counts
        return list(clouds)
    return [arr] if arr.ndim <= 2 else list(arr)


@dataclass
class SteeringProblem:
    """Fields plus N (initial, target) pairs that must share strata pairwise."""

    fields: tuple
    initial: list[np.ndarray]
    target: list[np.ndarray]
    options: SteeringOptions = field(default_factory=SteeringOptions)
    action: FiniteGroupAction | None = None
    alignments: list = field(init=False, repr=False)

    def __post_init__(self):
        self.fields = tuple(self.fields)
        if len(self.fields) < 2:
            raise ConfigurationError("steering needs at least two fields")
        self.initial = _cloud_list(self.initial)
        self.target = _cloud_list(self.target)
        self.initial = [np.array(as_points(c), dtype=np.float64) for c in self.initial]
        self.target = [np.array(as_points(c), dtype=np.float64) for c in self.target]
        if len(self.initial) != len(self.target) or not self.initial:
            raise ConfigurationError("need as many targets as initial clouds")
        self.alignments = []
        for h, (a, b) in enumerate(zip(self.initial, self.target)):
            if a.shape != b.shape:
                raise PreconditionError(f"pair {h}: clouds have shapes {a.shape} and {b.shape}")
            perm = same_stratum(a, b, 0.0, self.action)
            if perm is None:
                sa, sb = stratum_signature(a), stratum_signature(b)
                if sa.multiset != sb.multiset or same_stratum(a, b, 0.0) is None:
                    raise PreconditionError(
                        f"pair {h}: initial {sa} and target {sb} lie in different strata; equivariant "
                        "flows preserve the mass of every point (coincident points stay coincident, "
                        "distinct points stay distinct)"
                    )
                axes = ",".join(f"x{c}" for c in self.action.reflection_axes)
                raise PreconditionError(
                    f"pair {h}: initial and target lie on different sides of the reflection wall ({axes} = 0); "
                    "equivariant flows preserve the mass of every point and cannot carry it across the "
                    "fixed hyperplane, which is a separate stratum"
                )
            if a.shape[1] == 1 and len(stratum_signature(a)) > 1:
                log.warning("pair %d: one-dimensional points cannot pass each other; ordering may obstruct steering", h)
            self.alignments.append(perm)
        for group, name in ((self.initial, "initial"), (self.target, "target")):
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    if group[i].shape == group[j].shape and orbit_distance(group[i], group[j], limit=None) == 0:
                        raise PreconditionError(f"{name} clouds {i} and {j} coincide as orbits; one control cannot split them")

    @property
    def n_pairs(self) -> int:
        return len(self.initial)

    def labeled_targets(self) -> list[np.ndarray]:
        """Targets relabeled so coincidences line up with the initial labels."""
        return [perm.apply(t) for perm, t in zip(self.alignments, self.target)]


@dataclass
class SteeringResult:
    schedule: Schedule
    achieved_error: float
    evaluations: int
    converged: bool

    def report(self) -> str:
        return (
            f"converged {str(self.converged).lower()}\n"
            f"achieved_error {self.achieved_error!r}\n"
            f"evaluations {self.evaluations}\n"
            f"legs {len(self.schedule)}\n"
            f"total_time {self.schedule.total_time!r}\n"
        )


def steering_error(problem: SteeringProblem, schedule: Schedule) -> float:
    """Objective of ``schedule``: sum of orbit (or labeled) distances at the final time."""
    opts = problem.options
    targets = problem.labeled_targets() if opts.labeled else problem.target
    total = 0.0
    for q0, tgt in zip(problem.initial, targets):
        try:
            q = final_state(problem.fields, schedule, q0, opts.step, bound=opts.bound)
        except DivergenceError:
            return math.inf
        if opts.labeled:
            total += float(np.linalg.norm(q - tgt))
        else:
            total += orbit_distance(q, tgt, limit=None)
    return total


class _BudgetExhausted(Exception):
    pass


class _Evaluator:
    """Counts objective calls and remembers the best schedule seen."""

    def __init__(self, problem: SteeringProblem, budget: int):
        self.problem, self.budget, self.count = problem, budget, 0
        self.best_error, self.best_schedule = math.inf, Schedule()

    def __call__(self, schedule: Schedule) -> float:
        if self.count >= self.budget:
            raise _BudgetExhausted
        self.count += 1
        err = steering_error(self.problem, schedule)
        if err < self.best_error:
            self.best_error, self.best_schedule = err, schedule
        return err

    def residual(self, schedule: Schedule) -> np.ndarray:
        """Stacked ``final - target`` over pairs, targets relabeled by the optimal match."""
        if self.count >= self.budget:
            raise _BudgetExhausted
        self.count += 1
        problem, opts = self.problem, self.problem.options
        targets = problem.labeled_targets() if opts.labeled else problem.target
        parts, err = [], 0.0
        for q0, tgt in zip(problem.initial, targets):
            try:
                q = final_state(problem.fields, schedule, q0, opts.step, bound=opts.bound)
            except DivergenceError:
                # a large constant keeps the solver away without breaking it
                parts.append(np.full(tgt.size, opts.bound))
                err = math.inf
                continue
            if opts.labeled:
                r = q - tgt
                err += float(np.linalg.norm(r))
            else:
                dist, perm = orbit_match(q, tgt, limit=None)
                r = q - perm.apply(tgt)
                err += dist
            parts.append(r.reshape(-1))
        if err < self.best_error:
            self.best_error, self.best_schedule = err, schedule
        return np.concatenate(parts)


def _make_schedule(pattern, signs, durations, t_max) -> Schedule:
    """Legs from signed durations: ``sign * x`` runs for ``|x|`` (clamped to ``t_max``)."""
    legs = []
    for i, sg, x in zip(pattern, signs, durations):
        x = float(x)
        legs.append(Leg(i, sg if x >= 0 else -sg, min(abs(x), t_max)))
    return Schedule(tuple(legs))


def _simplex(x: np.ndarray, scale: float, t_max: float) -> np.ndarray:
    pts = [x.copy()]
    for j in range(len(x)):
        y = x.copy()
        y[j] = y[j] + scale if y[j] + scale <= t_max else y[j] - scale
        pts.append(y)
    return np.array(pts)


def _polish(ev: _Evaluator, pattern, signs, x0, t_max, scale, maxfev, tol, signed=True) -> tuple[np.ndarray, float]:
    """Bounded Nelder-Mead over (signed) durations, restarted with a fresh simplex while it improves."""
    m = len(pattern)
    lo = -t_max if signed else 0.0
    x = np.clip(np.asarray(x0, dtype=np.float64), lo, t_max)
    fx = ev(_make_schedule(pattern, signs, x, t_max))
    start = ev.count
    while ev.count - start < maxfev and fx > tol:
        before = ev.count
        res = minimize(
            lambda t: ev(_make_schedule(pattern, signs, t, t_max)),
            x,
            method="Nelder-Mead",
            bounds=[(lo, t_max)] * m,
            options=dict(
                initial_simplex=_simplex(x, scale, t_max), maxfev=max(1, maxfev - (ev.count - start)),
                xatol=1e-12, fatol=tol * 1e-3, adaptive=m > 4,
            ),
        )
        improved = res.fun < fx * (1 - 1e-3)
        if res.fun < fx:
            x, fx = np.clip(res.x, lo, t_max), float(res.fun)
        if not improved or ev.count - before <= m + 1:
            break
        scale = max(min(scale, 4.0 * fx) * 0.5, 1e-6)
    return x, fx


def _least_squares(ev: _Evaluator, pattern, signs, x0, t_max, maxfev, tol):
    """Trust-region Gauss-Newton over signed durations, stopped by the evaluator's budget."""
    lo = -t_max
    x = np.clip(np.asarray(x0, dtype=np.float64), lo, t_max)
    stop = ev.count + maxfev

    def fun(t):
        if ev.count >= stop or ev.best_error <= tol:
            raise _BudgetExhausted
        return ev.residual(_make_schedule(pattern, signs, t, t_max))

    try:
        least_squares(fun, x, bounds=(lo, t_max), method="trf", jac="2-point",
                      xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=10 * maxfev)
    except _BudgetExhausted:
        if ev.count >= ev.budget:
            raise


def _local_search(ev: _Evaluator, pattern, signs, x0, opts: SteeringOptions, maxfev: int):
    """Tune the durations; with Nelder-Mead also try single-leg sign flips until none helps."""
    signs = list(signs)
    if opts.method == "least-squares":
        _least_squares(ev, pattern, signs, x0, opts.t_max, maxfev, opts.tolerance)
        return

    start = ev.count
    scale = 0.5 * opts.init_duration
    x, fx = _polish(ev, pattern, signs, x0, opts.t_max, scale, maxfev, opts.tolerance)
    improved = True
    while improved and fx > opts.tolerance and ev.count - start < maxfev:
        improved = False
        for j in range(len(pattern)):
            if ev.count - start >= maxfev or fx <= opts.tolerance:
                break
            trial = list(signs)
            trial[j] = -trial[j]
            fy = ev(_make_schedule(pattern, trial, x, opts.t_max))
            if fy < fx:
                signs = trial
                x, fx = _polish(ev, pattern, signs, x, opts.t_max, 0.5 * scale,
                                maxfev - (ev.count - start), opts.tolerance)
                improved = True


def _run_restart(problem, pattern, signs, x0, opts, maxfev):
    ev = _Evaluator(problem, maxfev)
    try:
        _local_search(ev, pattern, signs, x0, opts, maxfev)
    except _BudgetExhausted:
        pass
    return ev


def default_min_legs(problem: SteeringProblem) -> int:
    """Two more legs than the dimension of the (product) stratum being steered in."""
    dim = sum(len(stratum_signature(a)) * a.shape[1] for a in problem.initial)
    return max(2, dim + 2)


def steer(problem: SteeringProblem) -> SteeringResult:
    """Search a schedule driving every initial cloud to its target orbit.

    Each stage fixes the leg count ``m`` and runs rounds of ``restarts``
    seeded local searches (the first start of a stage re-uses the previous
    best, padded with idle legs) until the stage's share of the budget is
    spent or the tolerance is met.
    """
    opts = problem.options
    k = len(problem.fields)
    rng = np.random.default_rng(opts.seed)
    evaluations = 1
    best_schedule = Schedule()
    best_error = steering_error(problem, best_schedule)
    m0 = opts.min_legs if opts.min_legs is not None else min(default_min_legs(problem), opts.max_legs)
    m = m0
    stages = len(range(m0, opts.max_legs + 1, 2))
    per_restart = opts.restart_budget or max(50, (100 if opts.method == "least-squares" else 400) * (m0 + 1))
    while best_error > opts.tolerance and m <= opts.max_legs and evaluations < opts.budget:
        pattern = [j % k for j in range(m)]
        remaining = opts.budget - evaluations
        stage_end = evaluations + (remaining // stages if stages > 1 else remaining)
        stages -= 1
        warm = None
        if len(best_schedule):
            # the pattern extends the previous one; idle legs leave the error unchanged
            warm = [l.sign * l.duration for l in best_schedule.legs] + [0.0] * (m - len(best_schedule))
        while best_error > opts.tolerance and evaluations < stage_end:
            starts = []
            if warm is not None:
                starts.append(np.array(warm))
                warm = None
            while len(starts) < opts.restarts:
                starts.append(rng.uniform(0.0, opts.init_duration, m))
            cap = min(per_restart, (stage_end - evaluations) // len(starts))
            if cap < 1:
                break
            jobs = [(problem, pattern, [1] * m, x, opts, cap) for x in starts]
            if opts.threads > 1:
                with ThreadPoolExecutor(opts.threads) as pool:
                    outcomes = list(pool.map(lambda a: _run_restart(*a), jobs))
            else:
                outcomes = []
                for a in jobs:
                    outcomes.append(_run_restart(*a))
                    if outcomes[-1].best_error <= opts.tolerance:
                        break
            # ties resolved by restart index, independent of completion order
            for ev in outcomes:
                evaluations += ev.count
                if ev.best_error < best_error:
                    best_error, best_schedule = ev.best_error, ev.best_schedule
            log.info("legs=%d best_error=%.3e evaluations=%d", m, best_error, evaluations)
        m += 2
    final_error = steering_error(problem, best_schedule)
    return SteeringResult(best_schedule, final_error, evaluations, final_error <= opts.tolerance)


def ensemble_steer(problem: SteeringProblem) -> SteeringResult:
    """Same search with one shared schedule for all N pairs (objective sums over pairs)."""
    return steer(problem)


def refine_schedule(fields, schedule: Schedule, problem: SteeringProblem, budget: int) -> SteeringResult:
    """Polish the durations of a fixed leg sequence by simplex descent; never returns a worse schedule."""
    if tuple(fields) != problem.fields:
        problem = replace(problem, fields=tuple(fields))
    schedule.validate(len(problem.fields))
    opts = problem.options
    ev = _Evaluator(problem, max(1, budget))
    start_error = ev(schedule)
    if len(schedule) and start_error > 0:
        pattern = [l.field_index for l in schedule.legs]
        signs = [l.sign for l in schedule.legs]
        x0 = [min(l.duration, opts.t_max) for l in schedule.legs]
        try:
            _polish(ev, pattern, signs, x0, opts.t_max, 0.1 * opts.init_duration, budget, 0.0, signed=False)
        except _BudgetExhausted:
            pass
    best = ev.best_schedule if ev.best_error < start_error else schedule
    err = steering_error(problem, best)
    return SteeringResult(best, err, ev.count, err <= opts.tolerance)


def replay(problem: SteeringProblem, result: SteeringResult) -> list:
    """Trajectories of every pair under the result's schedule."""
    opts = problem.options
    return [run_schedule(problem.fields, result.schedule, q0, opts.step, bound=opts.bound) for q0 in problem.initial]

"""
Monte Carlo harness over many seeded runs of the closed loop.

Runs are grouped into chunks of consecutive indices, and each chunk steps its
runs together as one batch. Moments are merged along a binary tree over run
indices, so neither the chunk size nor the worker count changes a bit.
Count columns are averaged from exact integer sums.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import root

from app.core.config import settings
from app.core.exceptions import (
    ConvergenceError,
    DomainError,
    NumericError,
    RunFailure,
    ScenarioValidationError,
    StabilityError,
)
from app.core.sim import choice
from app.core.sim.blocks import (
    ConstantControllerParams,
    build_block,
    dc_gain,
)
from app.core.sim.loop import (
    InitialConditionPolicy,
    Scenario,
    SimulationRun,
    count_columns,
    ensure_stable,
    ensure_valid,
    quantity_labels,
    run_batch,
)
from app.core.sim.stats import TreeReducer


logger = logging.getLogger(__name__)

VEHICLE_PREFIXES = ("e_", "yhat_", "count_", "total_")


class EnsembleConfig(BaseModel):
    runs: int = Field(default=1000, ge=1)
    steps: int = Field(default=1000, ge=1)
    master_seed: int = Field(default=0, ge=0, le=2**64 - 1)
    ic_policy: Optional[InitialConditionPolicy] = None
    keep_runs: bool = False

    model_config = ConfigDict(frozen=True, extra="forbid")


class EnsembleStats:
    """Per-step ensemble mean and sample standard deviation of every tracked quantity."""

    def __init__(
        self,
        labels: List[str],
        mean: np.ndarray,
        std: np.ndarray,
        runs: int,
        master_seed: Optional[int] = None,
        profile_names: Optional[List[str]] = None,
        n_suburbs: int = 0,
        scenario_digest: str = "",
        policy: str = "",
        raw: Optional[np.ndarray] = None,
    ):
        self.labels = labels
        self.mean = mean
        self.std = std
        self.runs = runs
        self.master_seed = master_seed
        self.profile_names = profile_names or []
        self.n_suburbs = n_suburbs
        self.scenario_digest = scenario_digest
        self.policy = policy
        # (runs, steps, quantities) when raw trajectories are retained
        self.raw = raw
        self._index = {label: i for i, label in enumerate(labels)}

    @classmethod
    def from_run(cls, sim: SimulationRun) -> "EnsembleStats":
        data = sim.stack()
        return cls(
            labels=sim.labels(),
            mean=data,
            std=np.zeros_like(data),
            runs=1,
            master_seed=sim.seed,
            profile_names=sim.profile_names,
            n_suburbs=sim.n_suburbs,
            scenario_digest=sim.scenario_digest,
            policy=sim.policy,
            raw=data[None, :, :],
        )

    @property
    def steps(self) -> int:
        return self.mean.shape[0]

    def column(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise DomainError(f"unknown quantity {label!r}")

    def series(self, label: str) -> Tuple[np.ndarray, np.ndarray]:
        i = self.column(label)
        return self.mean[:, i], self.std[:, i]

    def runs_of(self, label: str) -> Optional[np.ndarray]:
        if self.raw is None:
            return None
        return self.raw[:, :, self.column(label)]


def run_chunk(
    scenario: Scenario,
    steps: int,
    master_seed: int,
    policy: Optional[InitialConditionPolicy],
    start: int,
    stop: int,
    keep_runs: bool,
) -> Tuple[TreeReducer, np.ndarray, Optional[np.ndarray]]:
    """Moments, exact count sums and (optionally) raw stacks of runs [start, stop)."""
    indices = list(range(start, stop))
    try:
        sims = run_batch(scenario, steps, master_seed, indices, policy=policy, check_stability=False)
    except NumericError as exc:
        failed = indices[exc.row or 0]
        raise RunFailure(failed, master_seed, f"{type(exc).__name__}: {exc}") from exc
    except Exception as exc:
        raise RunFailure(start, master_seed, f"{type(exc).__name__}: {exc}") from exc

    columns = count_columns(scenario.profile_names, scenario.n_suburbs)
    reducer = TreeReducer()
    data = np.stack([sim.stack() for sim in sims])
    for index, sample in zip(indices, data):
        reducer.add(index, sample)
    count_sums = data[:, :, columns].sum(axis=0)
    return reducer, count_sums, (data if keep_runs else None)


def resolve_workers(workers: Optional[int]) -> int:
    workers = settings.WORKERS if workers is None else workers
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def run_ensemble(
    scenario: Scenario,
    config: EnsembleConfig,
    workers: Optional[int] = None,
    chunk_runs: Optional[int] = None,
) -> EnsembleStats:
    ensure_valid(scenario)
    if config.ic_policy is not None:
        errors = config.ic_policy.violations(scenario.profiles)
        if errors:
            raise ScenarioValidationError(errors)
    ensure_stable(scenario)

    chunk_runs = chunk_runs or settings.CHUNK_RUNS
    if chunk_runs < 1:
        raise DomainError("chunk size must be >= 1")
    workers = resolve_workers(workers)
    chunks = [
        (start, min(start + chunk_runs, config.runs))
        for start in range(0, config.runs, chunk_runs)
    ]
    args = (scenario, config.steps, config.master_seed, config.ic_policy)

    logger.info(
        "ensemble: %d runs x %d steps, seed %d, %d chunks on %d worker(s)",
        config.runs,
        config.steps,
        config.master_seed,
        len(chunks),
        workers,
    )

    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
            futures = [
                pool.submit(run_chunk, *args, start, stop, config.keep_runs)
                for start, stop in chunks
            ]
            results = [f.result() for f in futures]
    else:
        results = [run_chunk(*args, start, stop, config.keep_runs) for start, stop in chunks]

    reducer = TreeReducer()
    count_sums = None
    for chunk_reducer, sums, _ in results:
        reducer.absorb(chunk_reducer)
        count_sums = sums if count_sums is None else count_sums + sums
    total = reducer.result()
    mean = total.mean.copy()
    # integer-valued sums are exact in float64, so these means are too
    mean[:, count_columns(scenario.profile_names, scenario.n_suburbs)] = count_sums / total.count
    raw = np.concatenate([kept for _, _, kept in results]) if config.keep_runs else None
    policy = config.ic_policy or scenario.initial_conditions

    return EnsembleStats(
        labels=quantity_labels(scenario.profile_names, scenario.n_suburbs),
        mean=mean,
        std=total.std(ddof=1),
        runs=total.count,
        master_seed=config.master_seed,
        profile_names=scenario.profile_names,
        n_suburbs=scenario.n_suburbs,
        scenario_digest=scenario.digest(),
        policy=policy.describe(),
        raw=raw,
    )


def window_means(stats: EnsembleStats, start: int, stop: int) -> Dict[str, float]:
    """Time average over steps [start, stop) of each per-step ensemble mean."""
    if not 0 <= start < stop <= stats.steps:
        raise DomainError(f"window [{start}, {stop}) outside [0, {stats.steps})")
    averaged = stats.mean[start:stop].mean(axis=0)
    return {label: float(value) for label, value in zip(stats.labels, averaged)}


class DriftReport(BaseModel):
    first_window: Tuple[int, int]
    second_window: Tuple[int, int]
    tolerance: float
    drift: Dict[str, float]
    max_drift: float
    passed: bool


def convergence_of_means(
    stats: EnsembleStats,
    first_window: Tuple[int, int],
    second_window: Tuple[int, int],
    tolerance: float = 0.5,
) -> DriftReport:
    first = window_means(stats, *first_window)
    second = window_means(stats, *second_window)
    drift = {label: second[label] - first[label] for label in stats.labels}
    worst = max(abs(d) for d in drift.values())
    return DriftReport(
        first_window=first_window,
        second_window=second_window,
        tolerance=tolerance,
        drift=drift,
        max_drift=worst,
        passed=worst < tolerance,
    )


# Mean-field steady state of the loop.


class FixedPointPrediction(BaseModel):
    references: List[float]
    incentives: List[float]
    errors: List[float]
    expected_counts: List[List[float]]
    residual: float
    evaluations: int
    dc_gains: List[float]

    @property
    def suburb_totals(self) -> List[float]:
        m = len(self.incentives)
        return [sum(row[j] for row in self.expected_counts) for j in range(m)]


def _controller_affine_terms(scenario: Scenario) -> Tuple[np.ndarray, np.ndarray]:
    """Steady-state pi_j = gain_j * e_j + bias_j for each controller channel."""
    gains, biases = [], []
    for params in scenario.controllers:
        if isinstance(params, ConstantControllerParams):
            gains.append(0.0)
            biases.append(params.value)
        else:
            gains.append(dc_gain(build_block(params)))
            biases.append(0.0)
    return np.array(gains), np.array(biases)


def fixed_point(
    scenario: Scenario,
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> FixedPointPrediction:
    """
    Solve pi = g * (r - n(pi)) for the mean-field incentives, where n_j(pi) is
    the expected Suburb j count over all profiles.

    Powell hybrid method from pi = 0 with the analytic Jacobian;
    ``max_iter`` bounds the Jacobian-sized rounds of residual evaluations.
    """
    tolerance = settings.ORACLE_TOLERANCE if tolerance is None else tolerance
    max_iter = settings.ORACLE_MAX_ITER if max_iter is None else max_iter

    ensure_valid(scenario)
    ensure_stable(scenario)
    for j, params in enumerate(scenario.filters):
        gain = dc_gain(build_block(params))
        if abs(gain - 1.0) > 1e-9:
            raise DomainError(f"filter channel {j} has DC gain {gain:.6g}; the oracle needs unit gain")

    m = scenario.n_suburbs
    g, bias = _controller_affine_terms(scenario)
    r = np.asarray(scenario.references, dtype=float)
    weights, offsets = choice.coefficient_matrix(scenario.profiles)
    population = np.array([p.population_size for p in scenario.profiles], dtype=float)

    def counts_at(pi):
        probs = choice.population_probabilities(weights, offsets, pi)
        return probs, population[:, None] * probs

    def residual(pi):
        _, counts = counts_at(pi)
        return pi - g * (r - counts[:, :m].sum(axis=0)) - bias

    def jacobian(pi):
        probs, _ = counts_at(pi)
        dn = np.zeros((m, m))
        for pop, p_row, w_row in zip(population, probs, weights):
            p_s = p_row[:m]
            dn += pop * (np.diag(p_s) - np.outer(p_s, p_s)) * w_row[:m]
        return np.eye(m) + g[:, None] * dn

    sol = root(
        residual,
        np.zeros(m),
        jac=jacobian,
        method="hybr",
        options={"xtol": tolerance, "maxfev": max_iter * (m + 1)},
    )
    if not sol.success:
        raise ConvergenceError(
            f"fixed point not reached: {sol.message}",
            last_iterate=np.asarray(sol.x).tolist(),
            residual=float(np.max(np.abs(residual(sol.x)))),
        )

    pi = np.asarray(sol.x, dtype=float)
    _, counts = counts_at(pi)
    n_star = counts[:, :m].sum(axis=0)
    logger.debug("fixed point after %d evaluations: pi=%s", sol.nfev, pi.tolist())
    return FixedPointPrediction(
        references=r.tolist(),
        incentives=pi.tolist(),
        errors=(r - n_star).tolist(),
        expected_counts=counts.tolist(),
        residual=float(np.max(np.abs(residual(pi)))),
        evaluations=int(sol.nfev),
        dc_gains=g.tolist(),
    )


class OracleComparison(BaseModel):
    """
    Window means of the ensemble against two predictions.

    ``predicted_*`` is the mean-field fixed point, which ignores the spread
    of the incentives across runs. ``mixture_*`` averages the logit counts
    over the incentives the runs actually produced; the pass criterion is
    judged against it, and ``mean_field_gap`` records how far the two differ.
    """

    window: Tuple[int, int]
    tolerance: float
    mean_counts: List[float]
    predicted_counts: List[float]
    mixture_counts: List[float]
    mean_errors: List[float]
    predicted_errors: List[float]
    mixture_errors: List[float]
    mean_field_gap: List[float]
    count_differences: List[float]
    error_differences: List[float]
    passed: bool


def mixture_counts(stats: EnsembleStats, window: Tuple[int, int]) -> List[float]:
    """
    Expected Suburb counts over ``window`` given the sampled incentives.

    Counts at step k + 1 are drawn from the logit at the incentives of step
    k, so the prediction for [a, b) averages the recorded expectations over
    [a - 1, b - 1).
    """
    start, stop = window
    if not 0 <= start < stop <= stats.steps:
        raise DomainError(f"window [{start}, {stop}) outside [0, {stats.steps})")
    shifted = max(start - 1, 0), max(stop - 1, 1)
    means = window_means(stats, *shifted)
    suburbs = choice.location_names(stats.n_suburbs)[:-1]
    return [means[f"expected_{loc}"] for loc in suburbs]


def oracle_comparison(
    stats: EnsembleStats,
    prediction: FixedPointPrediction,
    window: Tuple[int, int],
    tolerance: float = 1.0,
) -> OracleComparison:
    means = window_means(stats, *window)
    suburbs = choice.location_names(stats.n_suburbs)[:-1]
    mean_counts = [means[f"total_{loc}"] for loc in suburbs]
    mean_errors = [means[f"e_{j + 1}"] for j in range(stats.n_suburbs)]

    mixture = mixture_counts(stats, window)
    mixture_errors = [r - n for r, n in zip(prediction.references, mixture)]

    count_diff = [a - b for a, b in zip(mean_counts, mixture)]
    error_diff = [a - b for a, b in zip(mean_errors, mixture_errors)]
    return OracleComparison(
        window=window,
        tolerance=tolerance,
        mean_counts=mean_counts,
        predicted_counts=prediction.suburb_totals,
        mixture_counts=mixture,
        mean_errors=mean_errors,
        predicted_errors=prediction.errors,
        mixture_errors=mixture_errors,
        mean_field_gap=[a - b for a, b in zip(mixture, prediction.suburb_totals)],
        count_differences=count_diff,
        error_differences=error_diff,
        passed=all(abs(d) <= tolerance for d in count_diff + error_diff),
    )


class ConvergenceReport(BaseModel):
    policies: List[str]
    window: int
    tolerance: float
    precondition_ok: bool
    unstable: List[Tuple[str, int, float]] = []
    differences: Dict[str, float] = {}
    max_difference: Optional[float] = None
    passed: bool
    note: str = (
        "pragmatic criterion: late-window ensemble means compared at a fixed "
        "tolerance; not a test of convergence in distribution"
    )


def ergodicity_check(
    scenario: Scenario,
    config: EnsembleConfig,
    ic_policies: Sequence[InitialConditionPolicy],
    window: int,
    tolerance: float = 1.0,
    prefixes: Sequence[str] = VEHICLE_PREFIXES,
    workers: Optional[int] = None,
) -> ConvergenceReport:
    """
    Two ensembles with the same seed that differ only in their initial
    conditions. Quantities whose labels start with one of ``prefixes`` are
    compared over the last ``window`` steps.
    """
    if len(ic_policies) != 2:
        raise DomainError("ergodicity check needs exactly two initial-condition policies")
    if not 0 < window < config.steps:
        raise DomainError(f"window {window} must lie in (0, {config.steps})")
    names = [p.describe() for p in ic_policies]

    ensure_valid(scenario)
    try:
        ensure_stable(scenario)
    except StabilityError as exc:
        logger.warning("ergodicity check skipped: %s", exc)
        return ConvergenceReport(
            policies=names,
            window=window,
            tolerance=tolerance,
            precondition_ok=False,
            unstable=exc.unstable,
            passed=False,
        )

    late = (config.steps - window, config.steps)
    means = []
    for policy in ic_policies:
        stats = run_ensemble(
            scenario,
            config.model_copy(update={"ic_policy": policy, "keep_runs": False}),
            workers=workers,
        )
        means.append(window_means(stats, *late))

    differences = {
        label: means[0][label] - means[1][label]
        for label in means[0]
        if label.startswith(tuple(prefixes))
    }
    worst = max(abs(d) for d in differences.values())
    return ConvergenceReport(
        policies=names,
        window=window,
        tolerance=tolerance,
        precondition_ok=True,
        differences=differences,
        max_difference=worst,
        passed=worst < tolerance,
    )

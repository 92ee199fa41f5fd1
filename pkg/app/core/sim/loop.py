"""
One seeded run of the closed loop:

    filters -> y_hat -> e = r - y_hat -> controllers -> pi -> drivers -> y -> filters

Each step emits the drivers' current decisions as counts before they
re-decide, and filters only see counts up to the previous step.
"""

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field

from app.core.exceptions import (
    DomainError,
    LocatedError,
    NumericError,
    ScenarioValidationError,
    StabilityError,
)
from app.core.sim import choice
from app.core.sim.blocks import ControllerBank, ControllerParams, FilterBank, FilterParams
from app.core.sim.choice import DriverProfile


logger = logging.getLogger(__name__)


class InitialConditionKind(str, Enum):
    RANDOM_SIMPLEX = "random-simplex"
    FIXED = "fixed"


class InitialConditionPolicy(BaseModel):
    """
    How each profile's initial location probabilities are chosen.

    ``random-simplex`` draws one vector per profile uniformly on the simplex.
    ``fixed`` uses ``probabilities`` for every profile, or ``per_profile``
    keyed by profile name when classes start differently.
    """

    kind: InitialConditionKind = InitialConditionKind.RANDOM_SIMPLEX
    probabilities: Optional[List[float]] = None
    per_profile: Optional[Dict[str, List[float]]] = None

    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def random_simplex(cls) -> "InitialConditionPolicy":
        return cls(kind=InitialConditionKind.RANDOM_SIMPLEX)

    @classmethod
    def fixed(cls, probabilities: Sequence[float]) -> "InitialConditionPolicy":
        return cls(kind=InitialConditionKind.FIXED, probabilities=list(probabilities))

    @classmethod
    def all_at(cls, location: int, n_suburbs: int) -> "InitialConditionPolicy":
        p = [0.0] * (n_suburbs + 1)
        p[location] = 1.0
        return cls.fixed(p)

    def describe(self) -> str:
        if self.kind == InitialConditionKind.RANDOM_SIMPLEX:
            return self.kind.value
        if self.probabilities is not None:
            return "fixed:" + ",".join(repr(float(p)) for p in self.probabilities)
        return "fixed:per-profile"

    def violations(self, profiles: Sequence[DriverProfile]) -> List[LocatedError]:
        errors = []
        if self.kind == InitialConditionKind.RANDOM_SIMPLEX:
            if self.probabilities is not None or self.per_profile is not None:
                errors.append(
                    LocatedError(
                        section="ensemble",
                        key="ic_policy",
                        reason="random-simplex takes no probabilities",
                    )
                )
            return errors

        if (self.probabilities is None) == (self.per_profile is None):
            errors.append(
                LocatedError(
                    section="ensemble",
                    key="ic_policy",
                    reason="fixed needs exactly one of probabilities or per_profile",
                )
            )
            return errors

        n_locations = profiles[0].n_suburbs + 1 if profiles else 0
        if self.probabilities is not None:
            vectors = {"probabilities": self.probabilities}
        else:
            names = {p.name for p in profiles}
            for missing in sorted(names - set(self.per_profile)):
                errors.append(
                    LocatedError(
                        section="ensemble",
                        key=f"ic_policy.per_profile.{missing}",
                        reason="no initial probabilities for this profile",
                    )
                )
            for unknown in sorted(set(self.per_profile) - names):
                errors.append(
                    LocatedError(
                        section="ensemble",
                        key=f"ic_policy.per_profile.{unknown}",
                        reason="not a profile in this scenario",
                    )
                )
            vectors = {f"per_profile.{k}": v for k, v in self.per_profile.items()}

        for key, vector in vectors.items():
            try:
                probs = choice.ChoiceProbabilities.validated(vector, tol=1e-9)
            except DomainError as exc:
                errors.append(LocatedError(section="ensemble", key=f"ic_policy.{key}", reason=str(exc)))
                continue
            if probs.n_locations != n_locations:
                errors.append(
                    LocatedError(
                        section="ensemble",
                        key=f"ic_policy.{key}",
                        reason=f"expected {n_locations} probabilities, got {probs.n_locations}",
                    )
                )
        return errors


def parse_policy(text: str, n_suburbs: int) -> InitialConditionPolicy:
    """
    Shorthands: ``random-simplex``, ``city``, ``suburb-<j>`` (1-based) and
    ``fixed:<p1>,...,<pM+1>``.
    """
    text = text.strip()
    if text == InitialConditionKind.RANDOM_SIMPLEX.value:
        return InitialConditionPolicy.random_simplex()
    if text == "city":
        return InitialConditionPolicy.all_at(n_suburbs, n_suburbs)
    if text.startswith("suburb-"):
        try:
            j = int(text.removeprefix("suburb-"))
        except ValueError:
            raise DomainError(f"bad suburb index in initial-condition policy {text!r}")
        if not 1 <= j <= n_suburbs:
            raise DomainError(f"suburb index {j} out of range [1, {n_suburbs}]")
        return InitialConditionPolicy.all_at(j - 1, n_suburbs)
    if text.startswith("fixed:"):
        try:
            probs = [float(v) for v in text.removeprefix("fixed:").split(",")]
        except ValueError:
            raise DomainError(f"bad probability list in initial-condition policy {text!r}")
        if len(probs) != n_suburbs + 1:
            raise DomainError(f"fixed policy needs {n_suburbs + 1} probabilities, got {len(probs)}")
        choice.ChoiceProbabilities.validated(probs, tol=1e-9)
        return InitialConditionPolicy.fixed(probs)
    raise DomainError(
        f"unknown initial-condition policy {text!r}; "
        "expected random-simplex, city, suburb-<j> or fixed:<p1>,...,<pM+1>"
    )


class Scenario(BaseModel):
    references: List[float] = Field(min_length=1)
    profiles: List[DriverProfile] = Field(min_length=1)
    controllers: List[ControllerParams] = Field(min_length=1)
    filters: List[FilterParams] = Field(min_length=1)
    initial_conditions: InitialConditionPolicy = Field(
        default_factory=InitialConditionPolicy.random_simplex
    )
    decimation: int = Field(default=1, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def n_suburbs(self) -> int:
        return len(self.references)

    @property
    def n_drivers(self) -> int:
        return sum(p.population_size for p in self.profiles)

    @property
    def profile_names(self) -> List[str]:
        return [p.name for p in self.profiles]

    def violations(self) -> List[LocatedError]:
        errors: List[LocatedError] = []
        m = self.n_suburbs

        for profile in self.profiles:
            if profile.n_suburbs != m:
                errors.append(
                    LocatedError(
                        section="profiles",
                        key=f"{profile.name}.suburbs",
                        reason=f"profile has {profile.n_suburbs} suburbs, references have {m}",
                    )
                )
        seen = set()
        for profile in self.profiles:
            if profile.name in seen:
                errors.append(LocatedError(section="profiles", key=profile.name, reason="duplicate profile name"))
            seen.add(profile.name)

        if len(self.controllers) != m:
            errors.append(
                LocatedError(section="controllers", reason=f"expected {m} controllers, got {len(self.controllers)}")
            )
        if len(self.filters) != m:
            errors.append(
                LocatedError(section="filters", reason=f"expected {m} filters, got {len(self.filters)}")
            )
        for j, params in enumerate(self.filters):
            if getattr(params, "d", 0.0) != 0.0:
                errors.append(
                    LocatedError(section="filters", key=f"{j}.d", reason="filters must be strictly causal (d = 0)")
                )

        n = self.n_drivers
        if n <= m:
            errors.append(
                LocatedError(section="profiles", reason=f"total population {n} must exceed the suburb count {m}")
            )
        for j, r_j in enumerate(self.references):
            if not np.isfinite(r_j) or r_j < 0:
                errors.append(LocatedError(section="references", key=str(j), reason=f"reference {r_j} must be finite and >= 0"))
        if sum(self.references) > n:
            errors.append(
                LocatedError(
                    section="references",
                    reason=f"references sum to {sum(self.references)}, more than the {n} drivers",
                )
            )

        if not errors:
            errors.extend(self.initial_conditions.violations(self.profiles))
        return errors

    def build_controllers(self) -> ControllerBank:
        return ControllerBank.from_params(self.controllers)

    def build_filters(self) -> FilterBank:
        return FilterBank.from_params(self.filters)

    def with_policy(self, policy: InitialConditionPolicy) -> "Scenario":
        return self.model_copy(update={"initial_conditions": policy})

    def canonical_json(self) -> bytes:
        return orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json()).hexdigest()


def ensure_valid(scenario: Scenario) -> None:
    errors = scenario.violations()
    if errors:
        raise ScenarioValidationError(errors)


def stability_report(scenario: Scenario) -> List[dict]:
    return scenario.build_controllers().stability_report() + scenario.build_filters().stability_report()


def ensure_stable(scenario: Scenario) -> None:
    unstable = [
        (row["bank"], row["channel"], row["spectral_radius"])
        for row in stability_report(scenario)
        if not row["stable"]
    ]
    if unstable:
        raise StabilityError(unstable)


def run_generator(master_seed: int, run_index: int = 0) -> np.random.Generator:
    """Counter-based stream for run ``run_index`` of an ensemble seeded with ``master_seed``."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(run_index,))
    return np.random.Generator(np.random.Philox(seq))


def initial_probabilities(
    policy: InitialConditionPolicy,
    profiles: Sequence[DriverProfile],
    rng: np.random.Generator,
) -> np.ndarray:
    n_locations = profiles[0].n_suburbs + 1
    if policy.kind == InitialConditionKind.RANDOM_SIMPLEX:
        return np.vstack([rng.dirichlet(np.ones(n_locations)) for _ in profiles])
    if policy.probabilities is not None:
        return np.tile(np.asarray(policy.probabilities, dtype=float), (len(profiles), 1))
    return np.vstack([np.asarray(policy.per_profile[p.name], dtype=float) for p in profiles])


@dataclass
class LoopState:
    """
    Loop state for one run, or for a batch of runs stepped together when
    ``driver_states`` carries a leading run axis.
    """

    k: int
    driver_states: np.ndarray
    membership: np.ndarray
    populations: List[int]
    controllers: ControllerBank
    filters: FilterBank
    weights: np.ndarray
    offsets: np.ndarray
    references: np.ndarray
    errors: np.ndarray
    incentives: np.ndarray
    filtered: np.ndarray
    counts: np.ndarray

    @property
    def n_profiles(self) -> int:
        return self.weights.shape[0]

    @property
    def n_locations(self) -> int:
        return self.weights.shape[1]

    def profile_counts(self) -> np.ndarray:
        return choice.count_by_profile(
            self.driver_states, self.membership, self.n_profiles, self.n_locations
        )


class StepRecord(NamedTuple):
    k: int
    errors: np.ndarray
    incentives: np.ndarray
    filtered: np.ndarray
    counts: np.ndarray
    expected: np.ndarray

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=-2)


Streams = Union[np.random.Generator, Sequence[np.random.Generator]]


def _as_generator(seed: Union[int, np.random.Generator]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return run_generator(int(seed), 0)


def _uniforms(rng: Streams, n: int) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.random(n)
    return np.stack([g.random(n) for g in rng])


def _first_bad_row(values: np.ndarray) -> tuple[Optional[int], int]:
    where = np.argwhere(~np.isfinite(values))[0]
    return (int(where[0]) if values.ndim > 1 else None), int(where[-1])


def init(
    scenario: Scenario,
    seed: Union[int, np.random.Generator, Sequence[np.random.Generator]],
    policy: Optional[InitialConditionPolicy] = None,
) -> LoopState:
    """
    Draws the initial decisions. A sequence of generators builds a batched
    state with one run per generator, each consuming its own stream exactly
    as a single run would.
    """
    ensure_valid(scenario)
    if policy is not None:
        errors = policy.violations(scenario.profiles)
        if errors:
            raise ScenarioValidationError(errors)
    policy = policy or scenario.initial_conditions

    populations = [p.population_size for p in scenario.profiles]
    membership = np.repeat(np.arange(len(scenario.profiles)), populations)
    n = membership.size

    if isinstance(seed, (int, np.integer, np.random.Generator)):
        rng = _as_generator(seed)
        p0 = initial_probabilities(policy, scenario.profiles, rng)
        driver_states = choice.sample_population(p0, rng.random(n), membership)
        batch = None
    else:
        streams = list(seed)
        p0 = []
        uniforms = []
        for g in streams:
            p0.append(initial_probabilities(policy, scenario.profiles, g))
            uniforms.append(g.random(n))
        driver_states = choice.sample_population(np.stack(p0), np.stack(uniforms), membership)
        batch = len(streams)

    weights, offsets = choice.coefficient_matrix(scenario.profiles)
    m = scenario.n_suburbs
    lead = () if batch is None else (batch,)
    return LoopState(
        k=0,
        driver_states=driver_states,
        membership=membership,
        populations=populations,
        controllers=ControllerBank.from_params(scenario.controllers, batch=batch),
        filters=FilterBank.from_params(scenario.filters, batch=batch),
        weights=weights,
        offsets=offsets,
        references=np.asarray(scenario.references, dtype=float),
        errors=np.zeros(lead + (m,)),
        incentives=np.zeros(lead + (m,)),
        filtered=np.zeros(lead + (m,)),
        counts=np.zeros(lead + (m + 1,), dtype=np.int64),
    )


def step(scenario: Scenario, state: LoopState, rng: Streams) -> StepRecord:
    k = state.k
    y_hat = state.filters.output()
    e = state.references - y_hat

    if k % scenario.decimation == 0:
        pi = state.controllers.step(e)
    else:
        # between controller updates the last incentive is held
        pi = state.incentives
    if not np.all(np.isfinite(pi)):
        row, channel = _first_bad_row(pi)
        raise NumericError(
            f"incentive on channel {channel} is not finite at step {k}", channel=channel, row=row
        )

    counts = state.profile_counts()
    probs = choice.population_probabilities(state.weights, state.offsets, pi)
    expected = choice.expected_totals(probs, state.populations)
    state.driver_states = choice.sample_population(
        probs, _uniforms(rng, state.membership.size), state.membership
    )

    y = counts.sum(axis=-2)
    state.filters.update(y)

    state.errors, state.incentives, state.filtered, state.counts = e, pi, y_hat, y
    state.k = k + 1
    return StepRecord(k, e, pi, y_hat, counts, expected)


@dataclass
class SimulationRun:
    errors: np.ndarray
    incentives: np.ndarray
    filtered: np.ndarray
    counts: np.ndarray
    expected: np.ndarray
    profile_names: List[str]
    seed: Optional[int] = None
    run_index: int = 0
    scenario_digest: str = ""
    policy: str = ""

    @property
    def steps(self) -> int:
        return self.errors.shape[0]

    @property
    def n_suburbs(self) -> int:
        return self.errors.shape[1]

    def totals(self) -> np.ndarray:
        """Per-location counts summed over profiles, shape (steps, M+1)."""
        return self.counts.sum(axis=1)

    @property
    def city_counts(self) -> np.ndarray:
        return self.totals()[:, -1]

    def labels(self) -> List[str]:
        return quantity_labels(self.profile_names, self.n_suburbs)

    def stack(self) -> np.ndarray:
        """Every tracked quantity as columns of one (steps, Q) float array."""
        t = self.steps
        return np.hstack(
            [
                self.errors,
                self.incentives,
                self.filtered,
                self.counts.reshape(t, -1).astype(float),
                self.totals().astype(float),
                self.expected,
            ]
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.errors, self.incentives, self.filtered, self.counts):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.seed).encode())
        h.update(str(self.run_index).encode())
        h.update(self.scenario_digest.encode())
        return h.hexdigest()


def quantity_labels(profile_names: Sequence[str], n_suburbs: int) -> List[str]:
    locations = choice.location_names(n_suburbs)
    labels = [f"e_{j + 1}" for j in range(n_suburbs)]
    labels += [f"pi_{j + 1}" for j in range(n_suburbs)]
    labels += [f"yhat_{j + 1}" for j in range(n_suburbs)]
    labels += [f"count_{name}_{loc}" for name in profile_names for loc in locations]
    labels += [f"total_{loc}" for loc in locations]
    # logit expectation of the next step's totals
    labels += [f"expected_{loc}" for loc in locations]
    return labels


def count_columns(profile_names: Sequence[str], n_suburbs: int) -> np.ndarray:
    """Stack columns holding integer counts (per profile and totals)."""
    labels = quantity_labels(profile_names, n_suburbs)
    return np.array(
        [i for i, label in enumerate(labels) if label.startswith(("count_", "total_"))]
    )


def run_batch(
    scenario: Scenario,
    steps: int,
    seed: int,
    run_indices: Sequence[int],
    policy: Optional[InitialConditionPolicy] = None,
    check_stability: bool = True,
) -> List[SimulationRun]:
    """
    Steps the runs ``run_indices`` of the ensemble seeded with ``seed``
    together. Each run is bit-identical to the same run stepped alone.
    A NumericError carries the batch row of the first failing run.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    run_indices = list(run_indices)
    if not run_indices:
        raise DomainError("run_batch needs at least one run index")
    ensure_valid(scenario)
    if check_stability:
        ensure_stable(scenario)

    streams = [run_generator(seed, i) for i in run_indices]
    state = init(scenario, streams, policy)

    r, m, n_profiles = len(run_indices), scenario.n_suburbs, len(scenario.profiles)
    errors = np.empty((r, steps, m))
    incentives = np.empty((r, steps, m))
    filtered = np.empty((r, steps, m))
    counts = np.empty((r, steps, n_profiles, m + 1), dtype=np.int64)
    expected = np.empty((r, steps, m + 1))

    for k in range(steps):
        record = step(scenario, state, streams)
        errors[:, k], incentives[:, k], filtered[:, k], counts[:, k], expected[:, k] = (
            record.errors,
            record.incentives,
            record.filtered,
            record.counts,
            record.expected,
        )

    logger.debug("runs %d..%d (seed %d) finished %d steps", run_indices[0], run_indices[-1], seed, steps)

    digest = scenario.digest()
    described = (policy or scenario.initial_conditions).describe()
    return [
        SimulationRun(
            errors=errors[row],
            incentives=incentives[row],
            filtered=filtered[row],
            counts=counts[row],
            expected=expected[row],
            profile_names=scenario.profile_names,
            seed=seed,
            run_index=index,
            scenario_digest=digest,
            policy=described,
        )
        for row, index in enumerate(run_indices)
    ]


def run(
    scenario: Scenario,
    steps: int,
    seed: int,
    policy: Optional[InitialConditionPolicy] = None,
    run_index: int = 0,
    check_stability: bool = True,
) -> SimulationRun:
    return run_batch(scenario, steps, seed, [run_index], policy, check_stability)[0]

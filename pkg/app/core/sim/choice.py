"""
Multinomial-logit parking-location choice.

Locations are indexed 0..M-1 for the suburbs and M for the City. A driver's
utility for suburb j is ``incentive_weight * pi_j + base``; the City gets no
incentive and its utility is ``city_bias + base``.
"""

from enum import Enum
from typing import Iterable, List, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import softmax

from app.core.exceptions import DomainError, NumericError


class Attribute(str, Enum):
    TRAVEL_TIME = "travel-time"
    PARKING_FEE = "parking-fee"
    CHARGE_FEE = "charge-fee"
    BUS_TICKET = "bus-ticket"
    BUS_FREQUENCY = "bus-frequency"
    EV_CHARGER_COUNT = "ev-charger-count"


class AttributeEntry(BaseModel):
    label: str
    weight: float
    value: float

    model_config = ConfigDict(frozen=True, extra="forbid")


class AttributeBundle(BaseModel):
    """Itemised weighted attributes of one location for one population."""

    entries: List[AttributeEntry] = []

    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def from_mapping(cls, weights: dict, values: dict) -> "AttributeBundle":
        labels = [label for label in weights if label in values]
        missing = sorted(set(weights) ^ set(values), key=str)
        if missing:
            raise DomainError(f"attributes without both weight and value: {missing}")
        return cls(
            entries=[
                AttributeEntry(
                    label=label.value if isinstance(label, Attribute) else str(label),
                    weight=weights[label],
                    value=values[label],
                )
                for label in labels
            ]
        )

    def base_utility(self) -> float:
        total = 0.0
        for entry in self.entries:
            total += entry.weight * entry.value
        return total


class LocationUtilityParams(BaseModel):
    incentive_weight: float = 0.0
    base: float = 0.0
    city_bias: float = 0.0

    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def from_bundle(
        cls,
        bundle: AttributeBundle,
        incentive_weight: float = 0.0,
        city_bias: float = 0.0,
    ) -> "LocationUtilityParams":
        return cls(
            incentive_weight=incentive_weight,
            base=bundle.base_utility(),
            city_bias=city_bias,
        )


class DriverProfile(BaseModel):
    """A population of drivers sharing one set of utility parameters."""

    name: str = Field(default="population", pattern=r"^[A-Za-z0-9_-]+$")
    suburb_params: List[LocationUtilityParams] = Field(min_length=1)
    city_params: LocationUtilityParams
    population_size: int = Field(ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def check_location_roles(self) -> "DriverProfile":
        if self.city_params.incentive_weight != 0.0:
            raise ValueError("the City receives no incentive: city incentive_weight must be 0")
        for index, params in enumerate(self.suburb_params):
            if params.city_bias != 0.0:
                raise ValueError(f"suburb {index + 1} carries a city_bias; only the City entry may")
        return self

    @property
    def n_suburbs(self) -> int:
        return len(self.suburb_params)


class ChoiceProbabilities:
    """Probability vector over (Suburb 1, ..., Suburb M, City)."""

    __slots__ = ("p",)

    def __init__(self, p: np.ndarray):
        self.p = p

    @classmethod
    def validated(cls, p: Sequence[float], tol: float = 1e-12) -> "ChoiceProbabilities":
        arr = np.asarray(p, dtype=float)
        if arr.ndim != 1 or arr.size < 2:
            raise DomainError("choice probabilities need at least two locations")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
            raise DomainError(f"probabilities must lie in [0, 1]: {arr.tolist()}")
        if abs(arr.sum() - 1.0) > tol:
            raise DomainError(f"probabilities sum to {arr.sum()!r}, not 1")
        return cls(arr)

    @property
    def n_locations(self) -> int:
        return self.p.size

    @property
    def city(self) -> float:
        return float(self.p[-1])

    def suburb(self, j: int) -> float:
        return float(self.p[j])

    def cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.p)
        cdf[-1] = 1.0
        return cdf

    def __repr__(self):
        return f"ChoiceProbabilities({self.p.tolist()})"


class ChoiceOutcome(NamedTuple):
    location_index: int

    def as_vector(self, n_locations: int) -> np.ndarray:
        vec = np.zeros(n_locations, dtype=np.int64)
        vec[self.location_index] = 1
        return vec


def utility(profile: DriverProfile, location: int, incentive: float = 0.0) -> float:
    m = profile.n_suburbs
    if not 0 <= location <= m:
        raise DomainError(f"location {location} out of range [0, {m}]")
    if location == m:
        city = profile.city_params
        return city.city_bias + city.base
    params = profile.suburb_params[location]
    return params.incentive_weight * incentive + params.base


def utility_coefficients(profile: DriverProfile) -> tuple[np.ndarray, np.ndarray]:
    """Per-location (incentive weight, constant) pairs; the City weight is 0."""
    weights = np.array([p.incentive_weight for p in profile.suburb_params] + [0.0])
    offsets = np.array(
        [p.base for p in profile.suburb_params]
        + [profile.city_params.city_bias + profile.city_params.base]
    )
    return weights, offsets


def utilities(profile: DriverProfile, incentives: Sequence[float]) -> np.ndarray:
    pi = np.asarray(incentives, dtype=float)
    if pi.shape != (profile.n_suburbs,):
        raise DomainError(
            f"expected {profile.n_suburbs} incentives, got shape {pi.shape}"
        )
    weights, offsets = utility_coefficients(profile)
    u = weights * np.append(pi, 0.0) + offsets
    bad = np.flatnonzero(~np.isfinite(u))
    if bad.size:
        raise NumericError(
            f"non-finite utility at location {int(bad[0])}", location=int(bad[0])
        )
    return u


def choice_probabilities(
    profile: DriverProfile, incentives: Sequence[float]
) -> ChoiceProbabilities:
    # scipy's softmax shifts by the maximum utility before exponentiating
    return ChoiceProbabilities(softmax(utilities(profile, incentives)))


def sample_choice(probs: ChoiceProbabilities, rng: np.random.Generator) -> ChoiceOutcome:
    u = rng.random()
    return ChoiceOutcome(int(np.searchsorted(probs.cdf(), u, side="right")))


def sample_choices(
    probs: ChoiceProbabilities, rng: np.random.Generator, size: int
) -> np.ndarray:
    u = rng.random(size)
    return np.searchsorted(probs.cdf(), u, side="right")


def aggregate_counts(
    outcomes: Iterable[ChoiceOutcome], n_locations: int
) -> np.ndarray:
    indices = np.fromiter(
        (outcome.location_index for outcome in outcomes), dtype=np.int64
    )
    if indices.size and (indices.min() < 0 or indices.max() >= n_locations):
        raise DomainError(f"outcome outside [0, {n_locations - 1}]")
    return np.bincount(indices, minlength=n_locations)


# Population-level kernels used by the closed loop. Rows are profiles; any
# leading axes index independent runs stepped together.


def coefficient_matrix(
    profiles: Sequence[DriverProfile],
) -> tuple[np.ndarray, np.ndarray]:
    pairs = [utility_coefficients(profile) for profile in profiles]
    return np.vstack([w for w, _ in pairs]), np.vstack([o for _, o in pairs])


def population_probabilities(
    weights: np.ndarray, offsets: np.ndarray, incentives: np.ndarray
) -> np.ndarray:
    """Shape (..., P, M+1) for incentives of shape (..., M)."""
    pi = np.asarray(incentives, dtype=float)
    pi_ext = np.concatenate([pi, np.zeros(pi.shape[:-1] + (1,))], axis=-1)
    u = weights * pi_ext[..., None, :] + offsets
    if not np.all(np.isfinite(u)):
        where = np.argwhere(~np.isfinite(u))[0]
        row = int(where[0]) if u.ndim > 2 else None
        raise NumericError(
            f"non-finite utility for profile {int(where[-2])} at location {int(where[-1])}",
            location=int(where[-1]),
            row=row,
        )
    return softmax(u, axis=-1)


def sample_population(
    probs: np.ndarray,
    uniforms: np.ndarray,
    membership: np.ndarray,
) -> np.ndarray:
    """
    One location per driver. ``membership[i]`` is the profile row of driver
    i and ``uniforms[..., i]`` its draw, so the result matches calling
    sample_choice driver by driver with the same CDF rule.
    """
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return (np.asarray(uniforms)[..., None] >= cdf[..., membership, :]).sum(axis=-1)


def count_by_profile(
    states: np.ndarray, membership: np.ndarray, n_profiles: int, n_locations: int
) -> np.ndarray:
    lead = states.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    block = n_profiles * n_locations
    idx = membership * n_locations + states.reshape(rows, -1) + (np.arange(rows) * block)[:, None]
    flat = np.bincount(idx.ravel(), minlength=rows * block)
    return flat.reshape(*lead, n_profiles, n_locations)


def expected_totals(probs: np.ndarray, populations: Sequence[int]) -> np.ndarray:
    """Logit expectation of the next per-location counts, shape (..., M+1)."""
    total = populations[0] * probs[..., 0, :]
    for p, size in enumerate(populations[1:], start=1):
        total = total + size * probs[..., p, :]
    return total


def probability_surface(
    profile: DriverProfile,
    grid_1: Sequence[float],
    grid_2: Sequence[float],
) -> np.ndarray:
    """
    Probabilities on a pi_1 x pi_2 grid for a two-suburb profile.

    Returns shape (len(grid_1), len(grid_2), 3) ordered (Suburb 1, Suburb 2, City).
    """
    if profile.n_suburbs != 2:
        raise DomainError("probability surface is defined for two-suburb profiles")
    p1, p2 = np.meshgrid(np.asarray(grid_1, float), np.asarray(grid_2, float), indexing="ij")
    weights, offsets = utility_coefficients(profile)
    u = np.stack(
        [weights[0] * p1 + offsets[0], weights[1] * p2 + offsets[1], np.full_like(p1, offsets[2])],
        axis=-1,
    )
    return softmax(u, axis=-1)


def location_names(n_suburbs: int, city: str = "city") -> List[str]:
    return [f"suburb_{j + 1}" for j in range(n_suburbs)] + [city]

from typing import Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.sim.blocks import ControllerParams, FilterParams
from app.core.sim.loop import InitialConditionPolicy


# Scenario documents. Every model forbids unknown keys.


class AttributeDocument(BaseModel):
    weight: float
    value: float

    model_config = ConfigDict(extra="forbid")


class _BaseUtilityDocument(BaseModel):
    base: Optional[float] = None
    attributes: Optional[Dict[str, AttributeDocument]] = None

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_base_source(self):
        if (self.base is None) == (self.attributes is None):
            raise ValueError("give exactly one of base or attributes")
        return self


class SuburbDocument(_BaseUtilityDocument):
    incentive_weight: float


class CityDocument(_BaseUtilityDocument):
    bias: float = 0.0


class ProfileDocument(BaseModel):
    population: int = Field(ge=1)
    suburbs: List[SuburbDocument] = Field(min_length=1)
    city: CityDocument

    model_config = ConfigDict(extra="forbid")


class EnsembleDocument(BaseModel):
    runs: int = Field(default=1000, ge=1)
    steps: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    ic_policy: Union[str, InitialConditionPolicy] = "random-simplex"

    model_config = ConfigDict(extra="forbid")


class ScenarioDocument(BaseModel):
    references: List[float] = Field(min_length=1)
    profiles: Dict[str, ProfileDocument] = Field(min_length=1)
    controllers: List[ControllerParams] = Field(min_length=1)
    filters: List[FilterParams] = Field(min_length=1)
    ensemble: EnsembleDocument = Field(default_factory=EnsembleDocument)
    decimation: int = Field(default=1, ge=1)

    model_config = ConfigDict(extra="forbid")


# HTTP request and response bodies.


class ScenarioRequest(BaseModel):
    # None runs the built-in two-class scenario
    scenario: Optional[ScenarioDocument] = None


class SimulationRequest(ScenarioRequest):
    steps: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    ic_policy: Optional[str] = None


class EnsembleRequest(ScenarioRequest):
    runs: int = Field(default=100, ge=1)
    steps: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    ic_policy: Optional[str] = None
    window: int = Field(default=100, ge=1)


class ErgodicityRequest(ScenarioRequest):
    runs: int = Field(default=100, ge=1)
    steps: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    policies: List[str] = Field(default=["city", "suburb-1"], min_length=2, max_length=2)
    window: int = Field(default=100, ge=1)
    tolerance: float = Field(default=1.0, gt=0)


class OracleRequest(ScenarioRequest):
    tolerance: Optional[float] = Field(default=None, gt=0)
    max_iter: Optional[int] = Field(default=None, ge=1)


class StabilityChannel(BaseModel):
    bank: str
    channel: int
    spectral_radius: float
    stable: bool


class StabilityResponse(BaseModel):
    stable: bool
    channels: List[StabilityChannel]


class SeriesResponse(BaseModel):
    mean: List[float]
    std: List[float]


class SimulationResponse(BaseModel):
    steps: int
    seed: int
    scenario_digest: str
    digest: str
    series: Dict[str, List[float]]


class EnsembleResponse(BaseModel):
    runs: int
    steps: int
    seed: int
    scenario_digest: str
    window_means: Dict[str, float]
    series: Dict[str, SeriesResponse]


class ValidationResponse(BaseModel):
    valid: bool
    scenario_digest: str
    n_drivers: int
    n_suburbs: int
    document: dict

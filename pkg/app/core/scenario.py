"""
Scenario documents: YAML text <-> validated Scenario.

The grammar is documented in README.md. Parsing is strict: unknown keys,
missing sections and out-of-range values come back as located errors
(section, key, reason) rather than silent defaults. The only defaults are
the ``ensemble`` block and ``decimation``.
"""

import logging
from pathlib import Path
from typing import Any, List, Optional, Tuple, Union

import yaml
from pydantic import ValidationError

from app.core.exceptions import (
    DomainError,
    LocatedError,
    ScenarioSyntaxError,
    ScenarioValidationError,
)
from app.core.schemas import ProfileDocument, ScenarioDocument
from app.core.sim.blocks import DelayFilterParams, LagControllerParams
from app.core.sim.choice import AttributeBundle, DriverProfile, LocationUtilityParams
from app.core.sim.ensemble import EnsembleConfig
from app.core.sim.loop import (
    InitialConditionKind,
    InitialConditionPolicy,
    Scenario,
    ensure_valid,
    parse_policy,
)


logger = logging.getLogger(__name__)

PAPER_SCENARIO_FILE = Path(__file__).resolve().parents[2] / "scenarios" / "paper.yaml"


def located_errors(exc: ValidationError, prefix: Tuple = ()) -> List[LocatedError]:
    errors = []
    for err in exc.errors():
        loc = tuple(prefix) + tuple(err["loc"])
        section = str(loc[0]) if loc else "document"
        key = ".".join(str(part) for part in loc[1:])
        errors.append(LocatedError(section=section, key=key, reason=err["msg"]))
    return errors


def parse_document(document: Union[str, bytes, dict]) -> ScenarioDocument:
    if isinstance(document, (str, bytes)):
        try:
            data = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ScenarioSyntaxError(f"scenario is not valid YAML: {exc}") from exc
    else:
        data = document
    if not isinstance(data, dict):
        raise ScenarioSyntaxError("scenario document must be a mapping of sections")
    try:
        return ScenarioDocument.model_validate(data)
    except ValidationError as exc:
        raise ScenarioValidationError(located_errors(exc)) from exc


def _collapse(entry) -> float:
    if entry.attributes is None:
        return entry.base
    bundle = AttributeBundle.from_mapping(
        {label: attr.weight for label, attr in entry.attributes.items()},
        {label: attr.value for label, attr in entry.attributes.items()},
    )
    return bundle.base_utility()


def _profile(name: str, doc: ProfileDocument) -> DriverProfile:
    return DriverProfile(
        name=name,
        population_size=doc.population,
        suburb_params=[
            LocationUtilityParams(incentive_weight=s.incentive_weight, base=_collapse(s))
            for s in doc.suburbs
        ],
        city_params=LocationUtilityParams(city_bias=doc.city.bias, base=_collapse(doc.city)),
    )


def _policy(doc: ScenarioDocument) -> InitialConditionPolicy:
    policy = doc.ensemble.ic_policy
    if isinstance(policy, InitialConditionPolicy):
        return policy
    try:
        return parse_policy(policy, len(doc.references))
    except DomainError as exc:
        raise ScenarioValidationError(
            [LocatedError(section="ensemble", key="ic_policy", reason=str(exc))]
        ) from exc


def build_scenario(doc: ScenarioDocument) -> Scenario:
    try:
        scenario = Scenario(
            references=doc.references,
            profiles=[_profile(name, body) for name, body in doc.profiles.items()],
            controllers=doc.controllers,
            filters=doc.filters,
            initial_conditions=_policy(doc),
            decimation=doc.decimation,
        )
    except ValidationError as exc:
        raise ScenarioValidationError(located_errors(exc)) from exc
    ensure_valid(scenario)
    return scenario


def ensemble_config(doc: ScenarioDocument) -> EnsembleConfig:
    return EnsembleConfig(
        runs=doc.ensemble.runs,
        steps=doc.ensemble.steps,
        master_seed=doc.ensemble.seed,
    )


def parse_scenario(document: Union[str, bytes, dict]) -> Scenario:
    return build_scenario(parse_document(document))


def load_scenario(path: Union[str, Path]) -> Tuple[Scenario, EnsembleConfig]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioSyntaxError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    doc = parse_document(text)
    logger.info("loaded scenario %s", path)
    return build_scenario(doc), ensemble_config(doc)


def _policy_document(policy: InitialConditionPolicy) -> Any:
    if policy.kind == InitialConditionKind.RANDOM_SIMPLEX or policy.probabilities is not None:
        return policy.describe()
    return policy.model_dump(mode="json", exclude_none=True)


def scenario_document(scenario: Scenario, config: Optional[EnsembleConfig] = None) -> dict:
    """Canonical document form; key order is fixed so dumps are reproducible."""
    config = config or EnsembleConfig()
    return {
        "references": [float(r) for r in scenario.references],
        "profiles": {
            p.name: {
                "population": p.population_size,
                "suburbs": [
                    {"incentive_weight": s.incentive_weight, "base": s.base}
                    for s in p.suburb_params
                ],
                "city": {"bias": p.city_params.city_bias, "base": p.city_params.base},
            }
            for p in scenario.profiles
        },
        "controllers": [c.model_dump(mode="json") for c in scenario.controllers],
        "filters": [f.model_dump(mode="json") for f in scenario.filters],
        "ensemble": {
            "runs": config.runs,
            "steps": config.steps,
            "seed": config.master_seed,
            "ic_policy": _policy_document(scenario.initial_conditions),
        },
        "decimation": scenario.decimation,
    }


def dump_scenario(scenario: Scenario, config: Optional[EnsembleConfig] = None) -> str:
    return yaml.safe_dump(
        scenario_document(scenario, config),
        sort_keys=False,
        default_flow_style=None,
        allow_unicode=True,
    )


def scenario_digest(scenario: Scenario) -> str:
    return scenario.digest()


def paper_scenario() -> Scenario:
    """Two driver classes, two suburbs, lag controllers and one-step delay filters."""
    class_1 = DriverProfile(
        name="class_1",
        population_size=20,
        suburb_params=[
            LocationUtilityParams(incentive_weight=10.0, base=-62.28),
            LocationUtilityParams(incentive_weight=10.0, base=-66.0),
        ],
        city_params=LocationUtilityParams(city_bias=35.0, base=-53.12),
    )
    class_2 = DriverProfile(
        name="class_2",
        population_size=80,
        suburb_params=[
            LocationUtilityParams(incentive_weight=10.0, base=-51.5),
            LocationUtilityParams(incentive_weight=10.0, base=-61.0),
        ],
        city_params=LocationUtilityParams(city_bias=35.0, base=-35.0),
    )
    return Scenario(
        references=[25.0, 35.0],
        profiles=[class_1, class_2],
        controllers=[
            LagControllerParams(alpha=-0.01, beta=0.9, kappa=0.15),
            LagControllerParams(alpha=-0.01, beta=0.99, kappa=0.2),
        ],
        filters=[DelayFilterParams(steps=1), DelayFilterParams(steps=1)],
    )


def paper_config(runs: int = 1000, steps: int = 1000, seed: int = 0) -> EnsembleConfig:
    return EnsembleConfig(runs=runs, steps=steps, master_seed=seed)

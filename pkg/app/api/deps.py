from typing import NoReturn, Optional

from fastapi import HTTPException, status

from app.core import schemas
from app.core.exceptions import (
    ParkloopError,
    ScenarioSyntaxError,
    ScenarioValidationError,
    StabilityError,
)
from app.core.scenario import build_scenario, paper_scenario
from app.core.sim.loop import InitialConditionPolicy, Scenario, parse_policy


def raise_http(exc: ParkloopError) -> NoReturn:
    """Map engine errors onto HTTP: 422 invalid scenario, 409 unstable loop, 400 otherwise."""
    if isinstance(exc, ScenarioValidationError):
        raise HTTPException(
            status.HTTP_422_UNPROCESSABLE_CONTENT,
            {"message": str(exc), "errors": [err.model_dump() for err in exc.errors]},
        ) from exc
    if isinstance(exc, ScenarioSyntaxError):
        raise HTTPException(status.HTTP_422_UNPROCESSABLE_CONTENT, {"message": str(exc), "errors": []}) from exc
    if isinstance(exc, StabilityError):
        raise HTTPException(
            status.HTTP_409_CONFLICT,
            {
                "message": str(exc),
                "unstable": [
                    {"bank": bank, "channel": channel, "spectral_radius": radius}
                    for bank, channel, radius in exc.unstable
                ],
            },
        ) from exc
    raise HTTPException(status.HTTP_400_BAD_REQUEST, str(exc)) from exc


def resolve_scenario(payload: schemas.ScenarioRequest) -> Scenario:
    if payload.scenario is None:
        return paper_scenario()
    try:
        return build_scenario(payload.scenario)
    except ParkloopError as exc:
        raise_http(exc)


def resolve_policy(text: Optional[str], scenario: Scenario) -> Optional[InitialConditionPolicy]:
    if text is None:
        return None
    try:
        return parse_policy(text, scenario.n_suburbs)
    except ParkloopError as exc:
        raise_http(exc)

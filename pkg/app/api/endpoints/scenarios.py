from fastapi import APIRouter

from app.api.deps import raise_http
from app.core import schemas
from app.core.exceptions import ParkloopError
from app.core.scenario import build_scenario, paper_config, paper_scenario, scenario_document

router = APIRouter(prefix="/scenarios", tags=["Scenarios"])


@router.get("/paper")
async def get_paper_scenario():
    """The built-in two-class scenario as a canonical document."""
    return scenario_document(paper_scenario(), paper_config())


@router.post("/validate", response_model=schemas.ValidationResponse)
async def validate_scenario(document: schemas.ScenarioDocument):
    """
    Full validation of a scenario document. Schema errors come back as 422
    from FastAPI; cross-section errors come back as 422 with located errors.
    """
    try:
        scenario = build_scenario(document)
    except ParkloopError as exc:
        raise_http(exc)

    return schemas.ValidationResponse(
        valid=True,
        scenario_digest=scenario.digest(),
        n_drivers=scenario.n_drivers,
        n_suburbs=scenario.n_suburbs,
        document=scenario_document(scenario),
    )

import asyncio

from fastapi import APIRouter

from app.api.deps import raise_http, resolve_policy, resolve_scenario
from app.core import schemas
from app.core.exceptions import ParkloopError
from app.core.sim import ensemble
from app.core.sim.loop import stability_report

router = APIRouter(prefix="/analysis", tags=["Analysis"])


@router.post("/stability", response_model=schemas.StabilityResponse)
async def check_stability(payload: schemas.ScenarioRequest):
    scenario = resolve_scenario(payload)
    rows = [schemas.StabilityChannel(**row) for row in stability_report(scenario)]
    return schemas.StabilityResponse(stable=all(row.stable for row in rows), channels=rows)


@router.post("/oracle", response_model=ensemble.FixedPointPrediction)
async def mean_field_oracle(payload: schemas.OracleRequest):
    """Mean-field steady state; 409 when a channel is unstable, 400 on non-convergence."""
    scenario = resolve_scenario(payload)
    try:
        return await asyncio.to_thread(
            ensemble.fixed_point, scenario, payload.tolerance, payload.max_iter
        )
    except ParkloopError as exc:
        raise_http(exc)


@router.post("/ergodicity", response_model=ensemble.ConvergenceReport)
async def ergodicity(payload: schemas.ErgodicityRequest):
    scenario = resolve_scenario(payload)
    policies = [resolve_policy(text, scenario) for text in payload.policies]
    config = ensemble.EnsembleConfig(runs=payload.runs, steps=payload.steps, master_seed=payload.seed)
    try:
        return await asyncio.to_thread(
            ensemble.ergodicity_check,
            scenario,
            config,
            policies,
            payload.window,
            payload.tolerance,
        )
    except ParkloopError as exc:
        raise_http(exc)

import asyncio

from fastapi import APIRouter

from app.api.deps import raise_http, resolve_policy, resolve_scenario
from app.core import schemas
from app.core.exceptions import ParkloopError
from app.core.sim import ensemble, loop

router = APIRouter(prefix="/simulations", tags=["Simulations"])


@router.post("/run", response_model=schemas.SimulationResponse)
async def run_simulation(payload: schemas.SimulationRequest):
    """One seeded run; every tracked quantity as a per-step series."""
    scenario = resolve_scenario(payload)
    policy = resolve_policy(payload.ic_policy, scenario)
    try:
        sim = await asyncio.to_thread(loop.run, scenario, payload.steps, payload.seed, policy)
    except ParkloopError as exc:
        raise_http(exc)

    data = sim.stack()
    return schemas.SimulationResponse(
        steps=sim.steps,
        seed=payload.seed,
        scenario_digest=sim.scenario_digest,
        digest=sim.digest(),
        series={label: data[:, i].tolist() for i, label in enumerate(sim.labels())},
    )


@router.post("/ensemble", response_model=schemas.EnsembleResponse)
async def run_ensemble(payload: schemas.EnsembleRequest):
    """Ensemble mean and std per step plus late-window means."""
    scenario = resolve_scenario(payload)
    config = ensemble.EnsembleConfig(
        runs=payload.runs,
        steps=payload.steps,
        master_seed=payload.seed,
        ic_policy=resolve_policy(payload.ic_policy, scenario),
    )
    try:
        stats = await asyncio.to_thread(ensemble.run_ensemble, scenario, config)
        late = ensemble.window_means(stats, max(0, stats.steps - payload.window), stats.steps)
    except ParkloopError as exc:
        raise_http(exc)

    return schemas.EnsembleResponse(
        runs=stats.runs,
        steps=stats.steps,
        seed=payload.seed,
        scenario_digest=stats.scenario_digest,
        window_means=late,
        series={
            label: schemas.SeriesResponse(mean=stats.mean[:, i].tolist(), std=stats.std[:, i].tolist())
            for i, label in enumerate(stats.labels)
        },
    )

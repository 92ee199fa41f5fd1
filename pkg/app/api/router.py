from fastapi import APIRouter
from app.api.endpoints import analysis, scenarios, simulations

api_router = APIRouter()

api_router.include_router(scenarios.router)
api_router.include_router(simulations.router)
api_router.include_router(analysis.router)

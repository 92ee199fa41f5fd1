from contextlib import asynccontextmanager
import logging

from fastapi import FastAPI

from app.api.router import api_router
from app.core.config import TOOL_NAME, TOOL_VERSION, settings
from app.core.sim.pipeline import configure_logging


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging()
    logging.getLogger(__name__).info("%s %s ready, outputs under %s", TOOL_NAME, TOOL_VERSION, settings.OUTPUT_DIR)
    yield


app = FastAPI(title="parkloop incentive regulation", version=TOOL_VERSION, lifespan=lifespan)


app.include_router(api_router)


@app.get("/")
async def root():
    return {"message": f"Welcome to the {TOOL_NAME} API", "version": TOOL_VERSION}

import pytest
import pytest_asyncio
from httpx import AsyncClient, ASGITransport

from app.main import app
from app.core.scenario import paper_scenario
from app.core.sim.blocks import ConstantControllerParams, DelayFilterParams, LagControllerParams
from app.core.sim.choice import DriverProfile, LocationUtilityParams
from app.core.sim.loop import Scenario


@pytest_asyncio.fixture(scope="function")
async def client():
    async with AsyncClient(
        transport=ASGITransport(app=app), base_url="http://test"
    ) as ac:
        yield ac


@pytest.fixture(scope="session")
def paper():
    return paper_scenario()


@pytest.fixture(scope="session")
def class_1(paper):
    return paper.profiles[0]


@pytest.fixture(scope="session")
def class_2(paper):
    return paper.profiles[1]


def make_profile(name, population, suburbs, city_bias=0.0, city_base=0.0):
    return DriverProfile(
        name=name,
        population_size=population,
        suburb_params=[
            LocationUtilityParams(incentive_weight=w, base=b) for w, b in suburbs
        ],
        city_params=LocationUtilityParams(city_bias=city_bias, base=city_base),
    )


def open_loop(profiles, incentives, references=None):
    """Scenario whose controllers hold fixed incentives."""
    m = len(incentives)
    return Scenario(
        references=references or [0.0] * m,
        profiles=profiles,
        controllers=[ConstantControllerParams(value=v) for v in incentives],
        filters=[DelayFilterParams(steps=1) for _ in range(m)],
    )


def small_closed_loop(**overrides):
    fields = dict(
        references=[10.0],
        profiles=[make_profile("drivers", 30, [(1.0, -1.0)], city_bias=0.5, city_base=0.0)],
        controllers=[LagControllerParams(alpha=0.0, beta=0.5, kappa=0.1)],
        filters=[DelayFilterParams(steps=1)],
    )
    fields.update(overrides)
    return Scenario(**fields)

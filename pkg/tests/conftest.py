"""Shared test plumbing.

The HTTP apps are ASGI; the transport clients are sync. SyncAsgiClient
bridges the two in-process so tests can hand a plain httpx.Client-shaped
object to HttpTssClient and friends without a socket.
"""

import asyncio

import httpx
import pytest

from esource import ehrsim, population


class _SyncAsgiTransport(httpx.BaseTransport):
    def __init__(self, app):
        self._inner = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        async def run():
            response = await self._inner.handle_async_request(request)
            content = await response.aread()
            await response.aclose()
            return response, content

        response, content = asyncio.run(run())
        return httpx.Response(response.status_code, headers=response.headers,
                              content=content)


def asgi_client(app) -> httpx.Client:
    return httpx.Client(transport=_SyncAsgiTransport(app),
                        base_url="http://app.test")


SMALL_PRACTICES = (
    ehrsim.PracticeSite("pl-wroclaw-1", "asseco", "Poland", "T"),
    ehrsim.PracticeSite("uk-leeds-1", "vision", "UK", "T"),
    ehrsim.PracticeSite("nl-utrecht-1", "transhis", "Netherlands", "C"),
)


def small_world(size: int = 45, seed: int = 7, data_dir=None,
                practices=SMALL_PRACTICES) -> ehrsim.EhrWorld:
    cfg = population.PopulationConfig(size=size, seed=seed)
    return ehrsim.EhrWorld(population.seed_population(cfg),
                           practices=practices, seed=seed, data_dir=data_dir)


@pytest.fixture(scope="session")
def shared_world() -> ehrsim.EhrWorld:
    """Read-mostly world for tests that only inspect records."""
    return small_world()

import datetime

import numpy as np
import pytest

from smartflow.core.domain import Station, StationRegistry
from smartflow.core.ingest import DemandProfile
from smartflow.core.planner import (
    DistanceProvider,
    TransferTask,
    build_journeys,
    leftover_balance,
    schedule_journeys,
    to_document,
)
from smartflow.mocks.synthetic import tidal_network

PLAN_DATE = datetime.date(2016, 7, 1)


def make_registry(capacities, targets=None):
    targets = targets or [None] * len(capacities)
    return StationRegistry(
        Station(id=chr(ord("A") + idx), name=f"{chr(ord('A') + idx)} Street", lat=40.70 + 0.01 * idx,
                lon=-74.0 + 0.01 * idx, capacity=capacity, target=target)
        for idx, (capacity, target) in enumerate(zip(capacities, targets))
    )


def zero_profile(registry):
    return DemandProfile(registry.ids, np.zeros((len(registry), 24), dtype=np.int64))


@pytest.fixture
def registry():
    return make_registry([20, 20, 20])


@pytest.fixture
def flat_profile(registry):
    return zero_profile(registry)


@pytest.fixture
def tidal():
    return tidal_network(seed=0)


@pytest.fixture
def line_distances():
    """A-B 1 km, B-C 2 km, A-C 3 km."""
    return DistanceProvider.from_matrix(np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]]))


@pytest.fixture
def example_tasks():
    return [TransferTask(0, 1, 2, 8), TransferTask(0, 2, 1, 9)]


@pytest.fixture
def example_plan(registry, line_distances, example_tasks):
    """One truck loading 3 bikes at A, dropping 2 at B then 1 at C."""
    journeys = build_journeys(example_tasks, 5, line_distances)
    scheduled = schedule_journeys(journeys, example_tasks, speed_kmh=20.0, load_minutes=5)
    return to_document(scheduled, registry, PLAN_DATE, leftover_balance(example_tasks, scheduled))

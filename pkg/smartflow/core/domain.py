"""Core value types of the bike network and the flat action encoding.

Everything here is immutable: stations and registries are frozen pydantic
models / tuples, states and actions are frozen dataclasses.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, validator, root_validator

from smartflow.core.exceptions import ContractViolation, IngestError

logger = logging.getLogger(__name__)

REGISTRY_COLUMNS = ["id", "name", "lat", "lon", "capacity", "target"]


class Station(BaseModel):
    id: str
    name: str
    lat: float
    lon: float
    capacity: int
    target: Optional[int] = None

    class Config:
        frozen = True

    @validator("capacity")
    def _capacity_positive(cls, value):
        if value < 1:
            raise ValueError("capacity must be >= 1")
        return value

    @validator("lat")
    def _latitude(cls, value):
        if not -90.0 <= value <= 90.0:
            raise ValueError("latitude must lie in [-90, 90]")
        return value

    @validator("lon")
    def _longitude(cls, value):
        if not -180.0 <= value <= 180.0:
            raise ValueError("longitude must lie in [-180, 180]")
        return value

    @root_validator(skip_on_failure=True)
    def _default_target(cls, values):
        capacity = values["capacity"]
        if values.get("target") is None:
            values["target"] = capacity // 2
        if not 0 <= values["target"] <= capacity:
            raise ValueError(f"target {values['target']} must lie in [0, {capacity}]")
        return values


class StationRegistry:
    """Ordered station collection; list position is the station index used everywhere else."""

    def __init__(self, stations: Iterable[Station]):
        self._stations: Tuple[Station, ...] = tuple(stations)
        if not self._stations:
            raise ContractViolation("a station registry needs at least one station")
        ids = [station.id for station in self._stations]
        if len(set(ids)) != len(ids):
            raise ContractViolation("station ids in a registry must be unique")
        self._index = {station_id: idx for idx, station_id in enumerate(ids)}
        self._capacities = np.array([s.capacity for s in self._stations], dtype=np.int64)
        self._targets = np.array([s.target for s in self._stations], dtype=np.int64)
        self._capacities.setflags(write=False)
        self._targets.setflags(write=False)

    def __len__(self) -> int:
        return len(self._stations)

    def __iter__(self) -> Iterator[Station]:
        return iter(self._stations)

    def __getitem__(self, idx: int) -> Station:
        return self._stations[idx]

    @property
    def ids(self) -> List[str]:
        return [station.id for station in self._stations]

    @property
    def capacities(self) -> np.ndarray:
        return self._capacities

    @property
    def targets(self) -> np.ndarray:
        return self._targets

    def index_of(self, station_id: str) -> int:
        try:
            return self._index[station_id]
        except KeyError:
            raise ContractViolation(f"station '{station_id}' is not in the registry") from None

    def subset(self, station_ids: Sequence[str]) -> "StationRegistry":
        """Returns a registry holding ``station_ids`` in the given order."""
        return StationRegistry(self[self.index_of(station_id)] for station_id in station_ids)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([station.dict() for station in self._stations], columns=REGISTRY_COLUMNS)


def load_registry(path: Union[Path, str]) -> StationRegistry:
    """Reads a ``id,name,lat,lon,capacity[,target]`` CSV.

    Args:
      path: registry CSV; a missing or empty target falls back to floor(capacity / 2)

    Returns:
      the registry in file order
    """
    frame = pd.read_csv(path, dtype={"id": str, "name": str})
    missing = [column for column in REGISTRY_COLUMNS[:5] if column not in frame.columns]
    if missing:
        raise IngestError(f"registry is missing columns {missing}", path=str(path))
    stations = []
    for line, row in enumerate(frame.to_dict("records"), start=2):
        target = row.get("target")
        if target is not None and pd.isna(target):
            target = None
        try:
            stations.append(
                Station(
                    id=row["id"],
                    name=row["name"],
                    lat=row["lat"],
                    lon=row["lon"],
                    capacity=int(row["capacity"]),
                    target=None if target is None else int(target),
                )
            )
        except (ValueError, TypeError) as exc:
            raise IngestError(f"invalid station row: {exc}", path=str(path), line=line) from exc
    logger.info("Loaded %d stations from %s", len(stations), path)
    return StationRegistry(stations)


def save_registry(registry: StationRegistry, path: Union[Path, str]):
    """Writes the registry, always including the resolved target column."""
    registry.to_frame().to_csv(path, index=False, lineterminator="\n")


@dataclass(frozen=True)
class NetworkState:
    """Inventories per station plus the hour of day: the MDP state."""

    inventories: Tuple[int, ...]
    hour: int

    def __post_init__(self):
        if not 0 <= self.hour <= 23:
            raise ContractViolation(f"hour {self.hour} is outside [0, 23]")

    @classmethod
    def from_array(cls, inventories: np.ndarray, hour: int) -> "NetworkState":
        return cls(tuple(int(value) for value in inventories), int(hour))

    def as_array(self) -> np.ndarray:
        return np.array(self.inventories, dtype=np.int64)

    def as_vector(self) -> np.ndarray:
        """Raw observation: N inventories followed by the hour."""
        return np.array(self.inventories + (self.hour,), dtype=np.int64)

    def check_against(self, registry: StationRegistry):
        if len(self.inventories) != len(registry):
            raise ContractViolation(
                f"state has {len(self.inventories)} stations, registry has {len(registry)}"
            )
        inventories = self.as_array()
        if np.any(inventories < 0) or np.any(inventories > registry.capacities):
            raise ContractViolation("inventories must lie within [0, capacity]")


@dataclass(frozen=True)
class Action:
    source: int
    dest: int

    def __post_init__(self):
        if self.source == self.dest:
            raise ContractViolation("an action must move a bike between two distinct stations")


def action_space_size(n: int) -> int:
    return n * (n - 1)


def encode_action(source: int, dest: int, n: int) -> int:
    """Flattens the ordered pair (source, dest) into [0, n*(n-1)).

    Pairs are ordered lexicographically with the diagonal skipped.
    """
    if n < 2:
        raise ContractViolation("the action space needs at least two stations")
    if not (0 <= source < n and 0 <= dest < n):
        raise ContractViolation(f"station indices ({source}, {dest}) out of range for n={n}")
    if source == dest:
        raise ContractViolation("source and dest must differ")
    return source * (n - 1) + (dest if dest < source else dest - 1)


def decode_action(index: int, n: int) -> Action:
    if n < 2:
        raise ContractViolation("the action space needs at least two stations")
    if not 0 <= index < action_space_size(n):
        raise ContractViolation(f"action index {index} out of range for n={n}")
    source, remainder = divmod(int(index), n - 1)
    dest = remainder if remainder < source else remainder + 1
    return Action(source, dest)


def need(state: NetworkState, j: int, stations: StationRegistry) -> int:
    """Shortfall of station ``j`` below its target inventory (never negative)."""
    if not 0 <= j < len(stations):
        raise ContractViolation(f"station index {j} out of range")
    return max(0, int(stations.targets[j]) - state.inventories[j])

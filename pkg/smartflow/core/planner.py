"""Tactical layer: turns the agent's strategic transfers into truck journeys.

Two deterministic passes: greedy surplus-to-nearest-deficit chaining under the
truck capacity, then backward just-in-time scheduling from each leg's hour of
need.
"""
import datetime
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError, validator, root_validator

from smartflow.core.domain import StationRegistry
from smartflow.core.env import EpisodeLog
from smartflow.core.exceptions import ContractViolation, DistanceConfigError, PlanValidationError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
MINUTES_PER_HOUR = 60


@dataclass(frozen=True)
class TransferTask:
    source: int
    dest: int
    quantity: int
    need_hour: int

    def __post_init__(self):
        if self.source == self.dest:
            raise ContractViolation("a transfer task needs distinct source and dest")
        if self.quantity < 1:
            raise ContractViolation("a transfer task moves at least one bike")
        if not 0 <= self.need_hour <= 23:
            raise ContractViolation(f"need_hour {self.need_hour} is outside [0, 23]")


@dataclass(frozen=True)
class Leg:
    station: int
    drop: int
    km: float
    dispatch_minute: Optional[int] = None
    arrival_minute: Optional[int] = None
    deadline_minute: Optional[int] = None


@dataclass(frozen=True)
class Journey:
    truck_id: int
    pickup_station: int
    load: int
    legs: Tuple[Leg, ...]
    tight_schedule: bool = False

    @property
    def total_km(self) -> float:
        return float(sum(leg.km for leg in self.legs))

    @property
    def deadline_minute(self) -> Optional[int]:
        deadlines = [leg.deadline_minute for leg in self.legs if leg.deadline_minute is not None]
        return min(deadlines) if deadlines else None


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km on a 6371 km sphere; works on scalars and numpy arrays."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return EARTH_RADIUS_KM * 2 * np.arctan2(np.sqrt(a), np.sqrt(1 - a))


class DistanceProvider:
    """Kilometres between station indices, from coordinates or an explicit matrix."""

    def __init__(self, matrix: np.ndarray, mode: str):
        self._matrix = np.asarray(matrix, dtype=np.float64)
        self.mode = mode

    @classmethod
    def from_registry(cls, registry: StationRegistry, circuity_factor: float = 1.3) -> "DistanceProvider":
        if circuity_factor < 1.0:
            raise DistanceConfigError("circuity_factor must be >= 1")
        lats = np.array([station.lat for station in registry])
        lons = np.array([station.lon for station in registry])
        matrix = haversine_km(lats[:, None], lons[:, None], lats[None, :], lons[None, :]) * circuity_factor
        np.fill_diagonal(matrix, 0.0)
        return cls(matrix, "haversine")

    @classmethod
    def from_matrix_csv(cls, path: Union[Path, str], station_ids: Sequence[str]) -> "DistanceProvider":
        """Square CSV whose first column and header are station ids, values in km."""
        frame = pd.read_csv(path, dtype={0: str}, index_col=0)
        frame.index = frame.index.astype(str)
        frame.columns = frame.columns.astype(str)
        missing = [sid for sid in station_ids if sid not in frame.index or sid not in frame.columns]
        if missing:
            raise DistanceConfigError(f"distance matrix '{path}' has no entries for stations {missing}")
        matrix = frame.loc[list(station_ids), list(station_ids)].apply(pd.to_numeric, errors="coerce").to_numpy()
        return cls.from_matrix(matrix)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "DistanceProvider":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DistanceConfigError(f"distance matrix must be square, got {matrix.shape}")
        if np.any(np.diag(matrix) != 0.0):
            raise DistanceConfigError("distance matrix diagonal must be zero")
        return cls(matrix, "matrix")

    def __len__(self) -> int:
        return self._matrix.shape[0]

    def distance(self, i: int, j: int) -> float:
        if not (0 <= i < len(self) and 0 <= j < len(self)):
            raise ContractViolation(f"station indices ({i}, {j}) out of range")
        if i == j:
            return 0.0
        value = float(self._matrix[i, j])
        if not math.isfinite(value) or value <= 0.0:
            raise DistanceConfigError(f"no usable distance between stations {i} and {j}")
        return value


def distance(provider: DistanceProvider, i: int, j: int) -> float:
    return provider.distance(i, j)


def travel_minutes(km: float, speed_kmh: float) -> int:
    """Whole minutes needed to drive ``km``, rounded up."""
    return math.ceil(km * MINUTES_PER_HOUR / speed_kmh - 1e-9)


def extract_strategic_plan(log: EpisodeLog) -> List[TransferTask]:
    """Positive-reward moves of the episode, consecutive repeats of one (source, dest) merged."""
    tasks: List[TransferTask] = []
    previous_positive = False
    for step in log.steps:
        if step.reward <= 0:
            previous_positive = False
            continue
        source, dest = step.action.source, step.action.dest
        if previous_positive and tasks and (tasks[-1].source, tasks[-1].dest) == (source, dest):
            tasks[-1] = replace(tasks[-1], quantity=tasks[-1].quantity + 1)
        else:
            tasks.append(TransferTask(source, dest, 1, step.info.hour_executed))
        previous_positive = True
    return tasks


def net_balances(tasks: Iterable[TransferTask]) -> Tuple[Dict[int, int], Dict[int, int]]:
    """Per-station surplus (net shipped) and deficit (net received)."""
    flow: Dict[int, int] = {}
    for task in tasks:
        flow[task.source] = flow.get(task.source, 0) + task.quantity
        flow[task.dest] = flow.get(task.dest, 0) - task.quantity
    surplus = {station: amount for station, amount in flow.items() if amount > 0}
    deficit = {station: -amount for station, amount in flow.items() if amount < 0}
    return surplus, deficit


def _largest(balances: Dict[int, int]) -> int:
    return min(balances, key=lambda station: (-balances[station], station))


def build_journeys(tasks: Sequence[TransferTask], capacity: int, provider: DistanceProvider) -> List[Journey]:
    """Greedy chaining: load the largest surplus, then drop at the nearest remaining deficit until empty.

    Ties pick the lowest station index. A truck loads
    min(surplus, capacity, outstanding deficit) so every journey ends empty.
    """
    if capacity < 1:
        raise ContractViolation("truck capacity must be >= 1")
    surplus, deficit = net_balances(tasks)
    journeys: List[Journey] = []
    while surplus and deficit:
        pickup = _largest(surplus)
        load = min(surplus[pickup], capacity, sum(deficit.values()))
        surplus[pickup] -= load
        if not surplus[pickup]:
            del surplus[pickup]

        legs = []
        position, on_board = pickup, load
        while on_board:
            nearest = min(deficit, key=lambda station: (provider.distance(position, station), station))
            drop = min(on_board, deficit[nearest])
            legs.append(Leg(nearest, drop, provider.distance(position, nearest)))
            on_board -= drop
            deficit[nearest] -= drop
            if not deficit[nearest]:
                del deficit[nearest]
            position = nearest
        journeys.append(Journey(len(journeys) + 1, pickup, load, tuple(legs)))

    if surplus or deficit:
        logger.info("Unserved balance after planning: surplus=%s deficit=%s", surplus, deficit)
    return journeys


def leftover_balance(tasks: Sequence[TransferTask], journeys: Sequence[Journey]) -> Dict[str, int]:
    surplus, deficit = net_balances(tasks)
    moved = sum(journey.load for journey in journeys)
    return {"surplus": sum(surplus.values()) - moved, "deficit": sum(deficit.values()) - moved}


def naive_round_trip_km(tasks: Sequence[TransferTask], provider: DistanceProvider, capacity: int) -> float:
    """Mileage of serving every task with its own out-and-back trips (ceil(quantity / capacity) of them)."""
    return float(sum(
        2.0 * provider.distance(task.source, task.dest) * math.ceil(task.quantity / capacity) for task in tasks
    ))


def _leg_deadlines(tasks: Sequence[TransferTask]) -> Dict[int, int]:
    deadlines: Dict[int, int] = {}
    for task in tasks:
        minute = task.need_hour * MINUTES_PER_HOUR
        deadlines[task.dest] = min(deadlines.get(task.dest, minute), minute)
    return deadlines


def schedule_journeys(
    journeys: Sequence[Journey],
    tasks: Sequence[TransferTask],
    speed_kmh: float,
    load_minutes: int,
) -> List[Journey]:
    """Backward just-in-time scheduling, most urgent journey first.

    Each leg's deadline is the earliest need hour among the tasks delivering to
    its station. Walking the route backwards, a leg arrives at
    min(deadline, next arrival - next travel - load time); the journey is
    dispatched travel + load time before the first arrival. A dispatch before
    00:00 is clamped to 00:00, the route is replayed forwards and the journey
    is flagged ``tight_schedule``.

    Returns:
      scheduled journeys sorted by earliest deadline, truck ids renumbered 1..n
    """
    if speed_kmh <= 0:
        raise ContractViolation("truck speed must be positive")
    deadlines = _leg_deadlines(tasks)
    scheduled = []
    for journey in journeys:
        if not journey.legs:
            raise ContractViolation(f"journey {journey.truck_id} has no legs")
        try:
            leg_deadlines = [deadlines[leg.station] for leg in journey.legs]
        except KeyError as exc:
            raise ContractViolation(f"journey {journey.truck_id} serves station {exc} that no task needs") from None
        travel = [travel_minutes(leg.km, speed_kmh) for leg in journey.legs]

        arrivals = [0] * len(journey.legs)
        arrivals[-1] = leg_deadlines[-1]
        for idx in range(len(journey.legs) - 2, -1, -1):
            arrivals[idx] = min(leg_deadlines[idx], arrivals[idx + 1] - travel[idx + 1] - load_minutes)
        dispatches = [arrivals[0] - travel[0] - load_minutes] + [
            arrivals[idx] - travel[idx] for idx in range(1, len(journey.legs))
        ]

        tight = dispatches[0] < 0
        if tight:
            clock = 0
            for idx in range(len(journey.legs)):
                departure = clock + (load_minutes if idx == 0 else 0)
                earliest_arrival = departure + travel[idx]
                arrivals[idx] = max(arrivals[idx], earliest_arrival)
                dispatches[idx] = arrivals[idx] - travel[idx] - (load_minutes if idx == 0 else 0)
                clock = arrivals[idx] + load_minutes
            dispatches[0] = max(dispatches[0], 0)

        legs = tuple(
            replace(leg, dispatch_minute=dispatches[idx], arrival_minute=arrivals[idx],
                    deadline_minute=leg_deadlines[idx])
            for idx, leg in enumerate(journey.legs)
        )
        scheduled.append(replace(journey, legs=legs, tight_schedule=tight))

    scheduled.sort(key=lambda journey: journey.deadline_minute)
    return [replace(journey, truck_id=idx) for idx, journey in enumerate(scheduled, start=1)]


def format_clock(minute: int) -> str:
    hours, minutes = divmod(int(minute), MINUTES_PER_HOUR)
    return f"{hours:02d}:{minutes:02d}"


class PickupEntry(BaseModel):
    station: str
    station_id: str
    load: int

    @validator("load")
    def _load_positive(cls, value):
        if value < 1:
            raise ValueError("load must be >= 1")
        return value


class LegEntry(BaseModel):
    station: str
    station_id: str
    drop: int
    dispatch_time: str
    arrival_time: str
    km: float

    @validator("drop")
    def _drop_positive(cls, value):
        if value < 1:
            raise ValueError("drop must be >= 1")
        return value

    @validator("dispatch_time", "arrival_time")
    def _clock(cls, value):
        hours, _, minutes = value.partition(":")
        if not (len(hours) == 2 and len(minutes) == 2 and hours.isdigit() and minutes.isdigit()
                and int(hours) < 24 and int(minutes) < 60):
            raise ValueError(f"'{value}' is not an HH:MM time")
        return value

    @validator("km")
    def _km_non_negative(cls, value):
        if value < 0 or not math.isfinite(value):
            raise ValueError("km must be finite and >= 0")
        return value


class TruckPlan(BaseModel):
    truck_id: int
    pickup: PickupEntry
    legs: List[LegEntry]
    total_km: float
    tight_schedule: bool = False

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        if not values["legs"]:
            raise ValueError("a truck needs at least one leg")
        if sum(leg.drop for leg in values["legs"]) != values["pickup"].load:
            raise ValueError("bikes dropped must sum to the bikes loaded")
        if abs(sum(leg.km for leg in values["legs"]) - values["total_km"]) > 0.011:
            raise ValueError("total_km must equal the sum of leg km")
        return values


class PlanTotals(BaseModel):
    trucks: int
    bikes: int
    total_km: float


class PlanLeftover(BaseModel):
    surplus: int = 0
    deficit: int = 0


class JourneyPlan(BaseModel):
    """The journey plan document: planner output, report input, map input."""

    date: str
    trucks: List[TruckPlan]
    totals: Optional[PlanTotals] = None
    leftover: PlanLeftover = PlanLeftover()

    @validator("date")
    def _iso_date(cls, value):
        datetime.date.fromisoformat(value)
        return value

    @root_validator(skip_on_failure=True)
    def _fill_totals(cls, values):
        trucks = values["trucks"]
        computed = PlanTotals(
            trucks=len(trucks),
            bikes=sum(truck.pickup.load for truck in trucks),
            total_km=round(sum(truck.total_km for truck in trucks), 2),
        )
        if values.get("totals") is None:
            values["totals"] = computed
        elif (values["totals"].trucks, values["totals"].bikes) != (computed.trucks, computed.bikes):
            raise ValueError("totals do not match the trucks listed")
        return values


def validate_plan(plan: Union[JourneyPlan, dict, str]) -> JourneyPlan:
    """Parses a plan from a model, dict or JSON text.

    Raises:
      PlanValidationError: listing the dotted path of every offending field
    """
    if isinstance(plan, JourneyPlan):
        return plan
    try:
        if isinstance(plan, str):
            return JourneyPlan.parse_raw(plan)
        return JourneyPlan.parse_obj(plan)
    except ValidationError as exc:
        paths = [".".join(str(part) for part in error["loc"]) for error in exc.errors()]
        raise PlanValidationError(paths, str(exc)) from exc


def to_document(
    journeys: Sequence[Journey],
    registry: StationRegistry,
    date: Union[datetime.date, str],
    leftover: Optional[Dict[str, int]] = None,
) -> JourneyPlan:
    date_text = date.isoformat() if isinstance(date, datetime.date) else str(date)
    trucks = []
    for journey in journeys:
        if any(leg.arrival_minute is None for leg in journey.legs):
            raise ContractViolation(f"journey {journey.truck_id} must be scheduled before export")
        pickup = registry[journey.pickup_station]
        legs = [
            LegEntry(
                station=registry[leg.station].name,
                station_id=registry[leg.station].id,
                drop=leg.drop,
                dispatch_time=format_clock(leg.dispatch_minute),
                arrival_time=format_clock(leg.arrival_minute),
                km=round(leg.km, 2),
            )
            for leg in journey.legs
        ]
        trucks.append(
            TruckPlan(
                truck_id=journey.truck_id,
                pickup=PickupEntry(station=pickup.name, station_id=pickup.id, load=journey.load),
                legs=legs,
                total_km=round(sum(leg.km for leg in legs), 2),
                tight_schedule=journey.tight_schedule,
            )
        )
    return JourneyPlan(date=date_text, trucks=trucks, leftover=PlanLeftover(**(leftover or {})))


def plan_to_json(plan: JourneyPlan) -> str:
    """Canonical serialization shared by the plan file and the report prompt."""
    return json.dumps(plan.dict(), indent=2, ensure_ascii=False)


def write_plan(plan: JourneyPlan, path: Union[Path, str]):
    with open(path, "w", encoding="utf-8") as file:
        file.write(plan_to_json(plan) + "\n")


def read_plan(path: Union[Path, str]) -> JourneyPlan:
    with open(path, "r", encoding="utf-8") as file:
        return validate_plan(file.read())


def plan_episode(
    log: EpisodeLog,
    registry: StationRegistry,
    provider: DistanceProvider,
    date: Union[datetime.date, str],
    truck_capacity: int,
    speed_kmh: float,
    load_minutes: int,
) -> Tuple[List[TransferTask], List[Journey], JourneyPlan]:
    """extract -> build_journeys -> schedule_journeys -> document."""
    tasks = extract_strategic_plan(log)
    journeys = build_journeys(tasks, truck_capacity, provider)
    scheduled = schedule_journeys(journeys, tasks, speed_kmh, load_minutes)
    document = to_document(scheduled, registry, date, leftover_balance(tasks, scheduled))
    logger.info("Planned %d tasks into %d journeys (%.2f km)", len(tasks), len(scheduled),
                document.totals.total_km)
    return tasks, scheduled, document

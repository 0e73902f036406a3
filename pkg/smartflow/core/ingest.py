"""Trip-log preparation: parsing, cleansing, busiest-station selection and the
hourly demand profile consumed by the simulator."""
import datetime
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Union

import numpy as np
import pandas as pd

from smartflow.core.domain import REGISTRY_COLUMNS, Station, StationRegistry
from smartflow.core.exceptions import IngestError

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
TRIP_COLUMNS = {
    "starttime": "start_time",
    "stoptime": "end_time",
    "start station id": "start_station_id",
    "end station id": "end_station_id",
    "start station latitude": "start_lat",
    "start station longitude": "start_lon",
    "end station latitude": "end_lat",
    "end station longitude": "end_lon",
}
DROP_RULES = ("malformed", "missing_coordinates", "invalid_duration", "unknown_station")
HOURS = 24


@dataclass(frozen=True)
class TripRecord:
    start_time: datetime.datetime
    end_time: datetime.datetime
    start_station_id: str
    end_station_id: str
    start_lat: Optional[float] = None
    start_lon: Optional[float] = None
    end_lat: Optional[float] = None
    end_lon: Optional[float] = None

    @property
    def duration_seconds(self) -> float:
        return (self.end_time - self.start_time).total_seconds()

    @property
    def start_hour(self) -> int:
        return self.start_time.hour

    def has_coordinates(self) -> bool:
        coords = (self.start_lat, self.start_lon, self.end_lat, self.end_lon)
        return all(value is not None and not np.isnan(value) for value in coords)


class TripLog(list):
    """List of cleansed trips that remembers how many rows each rule dropped."""

    def __init__(self, trips: Iterable[TripRecord] = (), dropped: Optional[Dict[str, int]] = None):
        super().__init__(trips)
        self.dropped: Dict[str, int] = {rule: 0 for rule in DROP_RULES}
        if dropped:
            self.dropped.update(dropped)


def cleanse_trips(
    trips: Iterable[TripRecord],
    min_duration_seconds: float = 60,
    max_duration_seconds: float = 86_400,
    known_station_ids: Optional[Set[str]] = None,
) -> TripLog:
    """Applies the cleansing rules; cleansing an already clean list changes nothing.

    Rules, in order: coordinates present, duration strictly inside
    (min_duration_seconds, max_duration_seconds), both station ids known (only
    when ``known_station_ids`` is given).
    """
    kept = []
    dropped: Counter = Counter()
    for trip in trips:
        if not trip.has_coordinates():
            dropped["missing_coordinates"] += 1
        elif not min_duration_seconds < trip.duration_seconds < max_duration_seconds:
            dropped["invalid_duration"] += 1
        elif known_station_ids is not None and (
            trip.start_station_id not in known_station_ids or trip.end_station_id not in known_station_ids
        ):
            dropped["unknown_station"] += 1
        else:
            kept.append(trip)
    return TripLog(kept, dict(dropped))


def _clean_station_id(value) -> Optional[str]:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return None
    text = str(value).strip()
    if text.endswith(".0"):
        text = text[:-2]
    return text or None


def _optional_float(value) -> Optional[float]:
    if value is None or pd.isna(value):
        return None
    return float(value)


def load_trips(
    path: Union[Path, str],
    min_duration_seconds: float = 60,
    max_duration_seconds: float = 86_400,
    known_station_ids: Optional[Set[str]] = None,
) -> TripLog:
    """Parses a Citi Bike legacy-schema trip CSV and cleanses it.

    Rows with too many fields, or whose timestamps or station ids cannot be
    parsed, are counted as ``malformed`` and skipped; an unreadable file raises
    ``OSError``.
    """
    rejected: List[List[str]] = []
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=True, engine="python",
        on_bad_lines=lambda fields: rejected.append(fields),
    )
    frame.columns = [column.strip().lower() for column in frame.columns]
    missing = [column for column in TRIP_COLUMNS if column not in frame.columns]
    if missing:
        raise IngestError(f"trip file is missing columns {missing}", path=str(path))
    frame = frame.rename(columns=TRIP_COLUMNS)[list(TRIP_COLUMNS.values())]

    start = pd.to_datetime(frame["start_time"], format=TIMESTAMP_FORMAT, errors="coerce")
    end = pd.to_datetime(frame["end_time"], format=TIMESTAMP_FORMAT, errors="coerce")
    coords = {
        column: pd.to_numeric(frame[column], errors="coerce")
        for column in ("start_lat", "start_lon", "end_lat", "end_lon")
    }
    malformed = start.isna() | end.isna() | frame["start_station_id"].isna() | frame["end_station_id"].isna()
    for column in coords:
        # a present but non-numeric coordinate is malformed; an empty one is "missing"
        malformed |= frame[column].notna() & coords[column].isna()

    records = []
    for idx in np.flatnonzero(~malformed.to_numpy()):
        records.append(
            TripRecord(
                start_time=start.iat[idx].to_pydatetime(),
                end_time=end.iat[idx].to_pydatetime(),
                start_station_id=_clean_station_id(frame["start_station_id"].iat[idx]),
                end_station_id=_clean_station_id(frame["end_station_id"].iat[idx]),
                start_lat=_optional_float(coords["start_lat"].iat[idx]),
                start_lon=_optional_float(coords["start_lon"].iat[idx]),
                end_lat=_optional_float(coords["end_lat"].iat[idx]),
                end_lon=_optional_float(coords["end_lon"].iat[idx]),
            )
        )

    trips = cleanse_trips(records, min_duration_seconds, max_duration_seconds, known_station_ids)
    trips.dropped["malformed"] = int(malformed.sum()) + len(rejected)
    logger.info(
        "Loaded %d trips from %s, dropped %s", len(trips), path,
        ", ".join(f"{rule}={count}" for rule, count in trips.dropped.items()),
    )
    return trips


def station_trip_counts(trips: Iterable[TripRecord]) -> Counter:
    """Departures plus arrivals per station id."""
    counts: Counter = Counter()
    for trip in trips:
        counts[trip.start_station_id] += 1
        counts[trip.end_station_id] += 1
    return counts


def select_top_k(trips: Iterable[TripRecord], k: int) -> List[str]:
    """Returns the ``k`` busiest station ids, busiest first, ties by ascending id."""
    if k < 1:
        raise IngestError("k must be >= 1")
    counts = station_trip_counts(trips)
    if len(counts) < k:
        raise IngestError(f"only {len(counts)} distinct stations in the trips, {k} requested "
                          f"(short by {k - len(counts)})")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    selected = [station_id for station_id, _ in ranked[:k]]
    logger.info("Selected %d busiest stations (top count %d)", k, ranked[0][1])
    return selected


@dataclass
class DemandProfile:
    """Net hourly flow per station: deltas[i][h] = arrivals - departures."""

    station_ids: List[str]
    deltas: np.ndarray
    date: Optional[datetime.date] = None
    meta: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.int64)
        if self.deltas.shape != (len(self.station_ids), HOURS):
            raise IngestError(
                f"demand profile must be {len(self.station_ids)}x{HOURS}, got {self.deltas.shape}"
            )

    def column_sums(self) -> np.ndarray:
        return self.deltas.sum(axis=0)

    def matches(self, registry: StationRegistry) -> bool:
        return self.station_ids == registry.ids

    def to_csv(self, path: Union[Path, str]):
        frame = pd.DataFrame(
            self.deltas, index=pd.Index(self.station_ids, name="station_id"),
            columns=[f"h{hour}" for hour in range(HOURS)],
        )
        frame.to_csv(path, lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Union[Path, str]) -> "DemandProfile":
        frame = pd.read_csv(path, dtype={"station_id": str}).set_index("station_id")
        columns = [f"h{hour}" for hour in range(HOURS)]
        missing = [column for column in columns if column not in frame.columns]
        if missing:
            raise IngestError(f"demand profile is missing columns {missing}", path=str(path))
        return cls(list(frame.index), frame[columns].to_numpy(dtype=np.int64))


def build_demand_profile(
    trips: Iterable[TripRecord], registry: StationRegistry, date: datetime.date
) -> DemandProfile:
    """Counts arrivals minus departures per selected station and hour of ``date``.

    A departure counts in its start hour, an arrival in its end hour; endpoints
    at unselected stations are ignored.
    """
    if len(registry) == 0:
        raise IngestError("registry must not be empty")
    deltas = np.zeros((len(registry), HOURS), dtype=np.int64)
    index = {station_id: idx for idx, station_id in enumerate(registry.ids)}
    touched = 0
    for trip in trips:
        hit = False
        source = index.get(trip.start_station_id)
        if source is not None and trip.start_time.date() == date:
            deltas[source, trip.start_hour] -= 1
            hit = True
        dest = index.get(trip.end_station_id)
        if dest is not None and trip.end_time.date() == date:
            deltas[dest, trip.end_time.hour] += 1
            hit = True
        touched += hit
    if touched == 0:
        raise IngestError(f"no trips touch the selected stations on {date.isoformat()}; "
                          "try a different date")
    logger.info("Demand profile for %s built from %d trips", date.isoformat(), touched)
    return DemandProfile(registry.ids, deltas, date=date, meta={"trips": touched})


STATION_COLUMNS = {"station_id": "id", "station_name": "name", "latitude": "lat", "longitude": "lon"}


def load_stations(path: Union[Path, str]) -> StationRegistry:
    """Reads station metadata (registry columns or GBFS ``station_information`` names).

    Stations without a capacity are skipped; the target defaults to floor(capacity / 2).
    """
    frame = pd.read_csv(path, dtype=str)
    frame.columns = [column.strip().lower() for column in frame.columns]
    frame = frame.rename(columns={k: v for k, v in STATION_COLUMNS.items() if v not in frame.columns})
    missing = [column for column in REGISTRY_COLUMNS[:5] if column not in frame.columns]
    if missing:
        raise IngestError(f"station file is missing columns {missing}", path=str(path))

    stations = []
    skipped = 0
    for line, row in enumerate(frame.to_dict("records"), start=2):
        if pd.isna(row["capacity"]):
            skipped += 1
            continue
        target = row.get("target")
        try:
            stations.append(
                Station(
                    id=_clean_station_id(row["id"]),
                    name=str(row["name"]).strip(),
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    capacity=int(float(row["capacity"])),
                    target=None if target is None or pd.isna(target) else int(float(target)),
                )
            )
        except (ValueError, TypeError) as exc:
            raise IngestError(f"invalid station row: {exc}", path=str(path), line=line) from exc
    if skipped:
        logger.info("Skipped %d stations without capacity in %s", skipped, path)
    return StationRegistry(stations)


def subset_registry(registry: StationRegistry, station_ids: List[str]) -> StationRegistry:
    """Registry restricted to ``station_ids`` in selection order.

    Raises:
      IngestError: a selected station has no metadata
    """
    known = set(registry.ids)
    unknown = [station_id for station_id in station_ids if station_id not in known]
    if unknown:
        raise IngestError(f"no station metadata for selected ids {unknown}")
    return registry.subset(station_ids)

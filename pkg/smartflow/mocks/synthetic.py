"""Synthetic station networks, tidal demand and trip corpora for desk-scale runs."""
import datetime
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd
from mimesis import Generic
from mimesis.locales import Locale

from smartflow.core.domain import Station, StationRegistry, save_registry
from smartflow.core.ingest import HOURS, TIMESTAMP_FORMAT, DemandProfile

logger = logging.getLogger(__name__)

CENTER_LAT, CENTER_LON = 40.7359, -73.9911
SPREAD_DEG = 0.03
MORNING_PEAK = (7, 8, 9)
EVENING_PEAK = (17, 18, 19)
DEFAULT_DATE = datetime.date(2016, 7, 1)


def station_names(count: int, seed: int = 0) -> List[str]:
    """Unique street-corner style names, reproducible for a seed."""
    generic = Generic(locale=Locale.EN, seed=seed)
    names: List[str] = []
    while len(names) < count:
        name = f"{generic.address.street_name()} & {generic.address.street_name()}"
        if name not in names:
            names.append(name)
    return names


def random_registry(count: int, seed: int = 0, min_capacity: int = 15, max_capacity: int = 40) -> StationRegistry:
    rng = np.random.default_rng(seed)
    names = station_names(count, seed)
    lats = CENTER_LAT + rng.uniform(-SPREAD_DEG, SPREAD_DEG, size=count)
    lons = CENTER_LON + rng.uniform(-SPREAD_DEG, SPREAD_DEG, size=count)
    capacities = rng.integers(min_capacity, max_capacity + 1, size=count)
    return StationRegistry(
        Station(id=str(100 + idx), name=names[idx], lat=round(float(lats[idx]), 6),
                lon=round(float(lons[idx]), 6), capacity=int(capacities[idx]))
        for idx in range(count)
    )


def tidal_network(seed: int = 0, capacity: int = 20, surge: int = 3):
    """Five stations: two residential, two business, one quiet hub.

    Residential stations drain during the morning peak and refill in the
    evening; business stations do the opposite.

    Returns:
      (registry, profile) with targets at half capacity
    """
    registry = random_registry(5, seed, min_capacity=capacity, max_capacity=capacity)
    deltas = np.zeros((5, HOURS), dtype=np.int64)
    for hour in MORNING_PEAK:
        deltas[[0, 1], hour] = -surge
        deltas[[2, 3], hour] = surge
    for hour in EVENING_PEAK:
        deltas[[0, 1], hour] = surge
        deltas[[2, 3], hour] = -surge
    return registry, DemandProfile(registry.ids, deltas, date=DEFAULT_DATE)


def trip_frame(
    registry: StationRegistry,
    n_trips: int,
    date: datetime.date = DEFAULT_DATE,
    seed: int = 0,
    dirty_fraction: float = 0.0,
) -> pd.DataFrame:
    """Trips in the legacy Citi Bike column layout.

    Station popularity follows a Zipf-like weight so the busiest stations are
    well separated. With ``dirty_fraction`` > 0 that share of rows gets either
    blank coordinates or an out-of-range duration.
    """
    rng = np.random.default_rng(seed)
    n = len(registry)
    weights = 1.0 / np.arange(1, n + 1)
    weights /= weights.sum()
    hour_weights = np.ones(HOURS)
    hour_weights[list(MORNING_PEAK + EVENING_PEAK)] = 4.0
    hour_weights /= hour_weights.sum()

    starts_idx = rng.choice(n, size=n_trips, p=weights)
    ends_idx = rng.choice(n, size=n_trips, p=weights)
    hours = rng.choice(HOURS, size=n_trips, p=hour_weights)
    seconds = rng.integers(0, 3600, size=n_trips)
    durations = rng.integers(120, 3600, size=n_trips)
    midnight = datetime.datetime.combine(date, datetime.time())
    start_times = [midnight + datetime.timedelta(hours=int(h), seconds=int(s)) for h, s in zip(hours, seconds)]
    end_times = [start + datetime.timedelta(seconds=int(d)) for start, d in zip(start_times, durations)]

    stations = list(registry)
    frame = pd.DataFrame(
        {
            "tripduration": durations,
            "starttime": [t.strftime(TIMESTAMP_FORMAT) for t in start_times],
            "stoptime": [t.strftime(TIMESTAMP_FORMAT) for t in end_times],
            "start station id": [stations[i].id for i in starts_idx],
            "start station name": [stations[i].name for i in starts_idx],
            "start station latitude": [stations[i].lat for i in starts_idx],
            "start station longitude": [stations[i].lon for i in starts_idx],
            "end station id": [stations[i].id for i in ends_idx],
            "end station name": [stations[i].name for i in ends_idx],
            "end station latitude": [stations[i].lat for i in ends_idx],
            "end station longitude": [stations[i].lon for i in ends_idx],
            "bikeid": rng.integers(10000, 30000, size=n_trips),
        }
    )
    if dirty_fraction > 0:
        dirty = np.flatnonzero(rng.random(n_trips) < dirty_fraction)
        blank, bad_duration = dirty[::2], dirty[1::2]
        frame["start station latitude"] = frame["start station latitude"].astype(object)
        frame.loc[blank, "start station latitude"] = None
        frame.loc[bad_duration, "stoptime"] = frame.loc[bad_duration, "starttime"]
    return frame


def write_trip_corpus(
    path: Union[Path, str],
    registry: StationRegistry,
    n_trips: int,
    date: datetime.date = DEFAULT_DATE,
    seed: int = 0,
    dirty_fraction: float = 0.0,
):
    trip_frame(registry, n_trips, date, seed, dirty_fraction).to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote %d synthetic trips to %s", n_trips, path)


def write_tidal_network(out_dir: Union[Path, str], seed: int = 0, n_trips: Optional[int] = None) -> dict:
    """Writes stations.csv, registry.csv, profile.csv and optionally trips.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry, profile = tidal_network(seed)
    paths = {"registry": out_dir / "registry.csv", "profile": out_dir / "profile.csv"}
    save_registry(registry, paths["registry"])
    save_registry(registry, out_dir / "stations.csv")
    paths["stations"] = out_dir / "stations.csv"
    profile.to_csv(paths["profile"])
    if n_trips:
        paths["trips"] = out_dir / "trips.csv"
        write_trip_corpus(paths["trips"], registry, n_trips, DEFAULT_DATE, seed)
    return paths

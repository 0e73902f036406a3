import datetime

import numpy as np
import pandas as pd
import pytest

from smartflow.core.exceptions import IngestError
from smartflow.core.ingest import (
    TripRecord,
    build_demand_profile,
    cleanse_trips,
    load_stations,
    load_trips,
    select_top_k,
    station_trip_counts,
    subset_registry,
)
from smartflow.mocks.synthetic import DEFAULT_DATE, random_registry, trip_frame, write_trip_corpus

from tests.conftest import make_registry

DAY = datetime.date(2016, 7, 1)


def trip(start_id, end_id, start="2016-07-01 08:10:00", end="2016-07-01 08:25:00", end_lat=40.75):
    return TripRecord(
        start_time=datetime.datetime.fromisoformat(start),
        end_time=datetime.datetime.fromisoformat(end),
        start_station_id=start_id,
        end_station_id=end_id,
        start_lat=40.70,
        start_lon=-74.0,
        end_lat=end_lat,
        end_lon=-73.98,
    )


def test_cleanse_drops_missing_coordinates_and_short_trips():
    good = trip("A", "B")
    trips = cleanse_trips([
        trip("A", "B", end_lat=None),
        trip("A", "B", start="2016-07-01 08:10:00", end="2016-07-01 08:10:30"),
        good,
    ])
    assert list(trips) == [good]
    assert trips.dropped["missing_coordinates"] == 1
    assert trips.dropped["invalid_duration"] == 1


def test_cleanse_is_idempotent():
    trips = [trip("A", "B"), trip("B", "C", end_lat=None), trip("C", "A", end="2016-07-05 08:25:00")]
    once = cleanse_trips(trips)
    assert list(cleanse_trips(once)) == list(once)


def test_cleanse_unknown_stations_only_with_a_known_set():
    trips = [trip("A", "Z")]
    assert len(cleanse_trips(trips)) == 1
    cleaned = cleanse_trips(trips, known_station_ids={"A", "B"})
    assert len(cleaned) == 0 and cleaned.dropped["unknown_station"] == 1


def test_trip_enrichment():
    record = trip("A", "B", start="2016-07-02 23:59:00", end="2016-07-03 00:20:00")
    assert record.start_hour == 23
    assert record.duration_seconds == 21 * 60


def test_select_top_k_examples():
    trips = [trip("B", "B")] * 4 + [trip("B", "A")] + [trip("A", "A")] * 2 + [trip("C", "C")]
    assert station_trip_counts(trips) == {"A": 5, "B": 9, "C": 2}
    assert select_top_k(trips, 2) == ["B", "A"]
    tied = [trip("B", "A")] * 5
    assert select_top_k(tied, 1) == ["A"]


def test_select_top_k_shortfall():
    with pytest.raises(IngestError, match="short by 1"):
        select_top_k([trip("A", "B")], 3)


def test_select_top_k_matches_full_sort_on_a_large_corpus(tmp_path):
    registry = random_registry(60, seed=3)
    path = tmp_path / "trips.csv"
    write_trip_corpus(path, registry, 10_000, seed=3)
    trips = load_trips(path)
    frame = pd.read_csv(path, dtype=str)
    counts = pd.concat([frame["start station id"], frame["end station id"]]).value_counts()
    oracle = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:30]
    assert select_top_k(trips, 30) == [station_id for station_id, _ in oracle]


def test_demand_profile_single_trip():
    registry = make_registry([10, 10])
    profile = build_demand_profile([trip("A", "B")], registry, DAY)
    assert profile.deltas[0, 8] == -1
    assert profile.deltas[1, 8] == 1
    assert np.count_nonzero(profile.deltas) == 2


def test_demand_profile_without_trips_on_the_date():
    registry = make_registry([10, 10])
    with pytest.raises(IngestError):
        build_demand_profile([trip("A", "B")], registry, datetime.date(2016, 7, 2))
    with pytest.raises(IngestError):
        build_demand_profile([], registry, DAY)


def test_demand_profile_column_sums_match_groupby(tmp_path):
    registry = random_registry(12, seed=5)
    path = tmp_path / "trips.csv"
    write_trip_corpus(path, registry, 3_000, date=DEFAULT_DATE, seed=5)
    trips = load_trips(path)
    profile = build_demand_profile(trips, registry, DEFAULT_DATE)

    frame = pd.read_csv(path, parse_dates=["starttime", "stoptime"])
    started = frame[frame["starttime"].dt.date == DEFAULT_DATE]
    ended = frame[frame["stoptime"].dt.date == DEFAULT_DATE]
    departures = started.groupby(started["starttime"].dt.hour).size()
    arrivals = ended.groupby(ended["stoptime"].dt.hour).size()
    oracle = arrivals.reindex(range(24), fill_value=0) - departures.reindex(range(24), fill_value=0)
    assert profile.column_sums().tolist() == oracle.tolist()


def test_load_trips_counts_every_drop_rule(tmp_path):
    registry = random_registry(8, seed=1)
    frame = trip_frame(registry, 1_000, seed=1, dirty_fraction=0.1)
    frame.loc[0, "starttime"] = "not a time"
    path = tmp_path / "trips.csv"
    frame.to_csv(path, index=False)

    trips = load_trips(path, known_station_ids=set(registry.ids[:-1]))
    blank = frame["start station latitude"].isna()
    instant = frame["stoptime"] == frame["starttime"]
    assert trips.dropped["malformed"] == 1
    assert trips.dropped["missing_coordinates"] == int(blank[1:].sum())
    assert trips.dropped["invalid_duration"] == int((instant & ~blank)[1:].sum())
    assert trips.dropped["unknown_station"] > 0
    assert len(trips) + sum(trips.dropped.values()) == len(frame)


def test_load_trips_skips_rows_with_extra_fields(tmp_path):
    header = "starttime,stoptime,start station id,end station id,start station latitude,"
    header += "start station longitude,end station latitude,end station longitude"
    good = "2016-07-01 08:00:00,2016-07-01 08:10:00,72,79,40.76,-73.99,40.72,-74.01"
    path = tmp_path / "trips.csv"
    path.write_text("\n".join([header, good, good + ",extra,fields", good.replace("72,79", "79,72")]) + "\n")

    trips = load_trips(path)
    assert [(t.start_station_id, t.end_station_id) for t in trips] == [("72", "79"), ("79", "72")]
    assert trips.dropped["malformed"] == 1
    assert len(trips) + sum(trips.dropped.values()) == 3


def test_load_trips_missing_columns(tmp_path):
    path = tmp_path / "trips.csv"
    path.write_text("starttime,stoptime\n2016-07-01 08:00:00,2016-07-01 08:10:00\n")
    with pytest.raises(IngestError, match="missing columns"):
        load_trips(path)


def test_load_stations_reads_gbfs_names(tmp_path):
    path = tmp_path / "stations.csv"
    path.write_text(
        "station_id,name,lat,lon,capacity\n"
        "72,W 52 St & 11 Av,40.767,-73.993,39\n"
        "79,Franklin St & W Broadway,40.719,-74.006,\n"
        "82,St James Pl & Pearl St,40.711,-74.000,27\n"
    )
    stations = load_stations(path)
    assert stations.ids == ["72", "82"]
    assert stations.targets.tolist() == [19, 13]
    assert subset_registry(stations, ["82"]).ids == ["82"]
    with pytest.raises(IngestError):
        subset_registry(stations, ["79"])

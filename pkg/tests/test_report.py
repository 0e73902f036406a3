import json

import numpy as np
import pytest
import requests

from smartflow.core import report as report_module
from smartflow.core.domain import Station, StationRegistry
from smartflow.core.exceptions import PlanValidationError
from smartflow.core.planner import (
    DistanceProvider,
    TransferTask,
    build_journeys,
    leftover_balance,
    plan_to_json,
    schedule_journeys,
    to_document,
)
from smartflow.core.report import (
    SOURCE_DETERMINISTIC,
    SOURCE_LLM,
    build_prompt,
    format_report,
    generate_report,
    ground_check,
)
from smartflow.mocks.synthetic import random_registry
from smartflow.utils.settings import LLMSettings

from tests.conftest import PLAN_DATE, make_registry

LLM_URL = "http://llm.test/v1/chat/completions"


def random_plan(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    registry = random_registry(n, seed=seed)
    provider = DistanceProvider.from_registry(registry)
    tasks = []
    for _ in range(int(rng.integers(1, 10))):
        source, dest = rng.choice(n, size=2, replace=False)
        tasks.append(TransferTask(int(source), int(dest), int(rng.integers(1, 6)), int(rng.integers(0, 24))))
    capacity = int(rng.integers(2, 12))
    journeys = schedule_journeys(build_journeys(tasks, capacity, provider), tasks, 20.0, 5)
    return to_document(journeys, registry, PLAN_DATE, leftover_balance(tasks, journeys))


@pytest.fixture
def llm_settings(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for name in ("URL", "KEY", "MODEL", "TIMEOUT_SECONDS", "MAX_TOKENS"):
        monkeypatch.delenv(f"SMARTFLOW_LLM_{name}", raising=False)
    return LLMSettings(url=LLM_URL, key="secret", timeout_seconds=2.0)


class FakeResponse:
    def __init__(self, payload=None, status=200, text=None):
        self.payload = payload
        self.status_code = status
        self.text = text

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"{self.status_code} Server Error")

    def json(self):
        if self.text is not None:
            return json.loads(self.text)
        return self.payload


def completion(content):
    return FakeResponse({"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_empty_plan_report():
    report = format_report({"date": "2016-07-01", "trucks": []})
    assert report.title == "# SmartFlow Dispatch Report — 2016-07-01"
    assert report.manager_briefing.startswith("0 trucks dispatched for 2016-07-01")
    assert report.tickets == []
    assert report.source == SOURCE_DETERMINISTIC


def test_ticket_lines(example_plan):
    report = format_report(example_plan)
    assert "1 truck dispatched for 2016-07-01, moving 3 bikes over 3.00 km in total." in report.markdown
    [ticket] = report.tickets
    lines = ticket.splitlines()
    assert lines[0] == "## Truck 1"
    assert [line for line in lines if line.startswith("- Pickup:")] == [
        "- Pickup: A Street — load 3 bikes — dispatch 07:52"
    ]
    assert [line for line in lines if line.startswith("- ") and "drop" in line] == [
        "- 08:00 — B Street — drop 2 bikes",
        "- 09:00 — C Street — drop 1 bikes",
    ]
    assert lines[-1] == "Route distance: 3.00 km"


def test_report_is_byte_identical_for_the_same_plan(example_plan):
    assert format_report(example_plan).markdown == format_report(json.loads(plan_to_json(example_plan))).markdown


def test_report_rejects_an_invalid_plan():
    with pytest.raises(PlanValidationError):
        format_report({"date": "2016-07-01", "trucks": [{"truck_id": 1}]})


def test_deterministic_reports_are_grounded():
    for seed in range(500):
        plan = random_plan(seed)
        result = ground_check(format_report(plan).markdown, plan)
        assert result, (seed, result.violations)


def _mutations(plan):
    truck = plan.trucks[0]
    leg = truck.legs[0]
    line = f"- {leg.arrival_time} — {leg.station} — drop {leg.drop} bikes"
    hours, minutes = map(int, leg.arrival_time.split(":"))
    shifted = f"{hours:02d}:{(minutes + 7) % 60:02d}"
    return line, [
        f"- {leg.arrival_time} — Phantom Plaza — drop {leg.drop} bikes",
        f"- {leg.arrival_time} — {leg.station} — drop {leg.drop + 1} bikes",
        f"- {shifted} — {leg.station} — drop {leg.drop} bikes",
    ]


def test_mutated_reports_fail_grounding():
    checked = 0
    for seed in range(100):
        plan = random_plan(seed)
        if not plan.trucks:
            continue
        text = format_report(plan).markdown
        original, mutated_lines = _mutations(plan)
        for mutated in mutated_lines:
            result = ground_check(text.replace(original, mutated, 1), plan)
            assert not result, (seed, mutated)
            checked += 1
        if checked >= 60:
            break
    assert checked >= 20


def test_invented_station_is_reported(example_plan):
    text = format_report(example_plan).markdown + "\nAlso send a truck to Station Zeta.\n"
    result = ground_check(text, example_plan)
    assert not result
    assert any("Zeta" in violation for violation in result.violations)


@pytest.fixture
def corner_plan(line_distances, example_tasks):
    """The example plan on three Manhattan street corners."""
    names = ["Central Park S & 6 Ave", "W 52 St & 11 Ave", "Broadway & E 14 St"]
    registry = StationRegistry(
        Station(id=station.id, name=name, lat=station.lat, lon=station.lon, capacity=station.capacity)
        for station, name in zip(make_registry([20, 20, 20]), names)
    )
    journeys = build_journeys(example_tasks, 5, line_distances)
    scheduled = schedule_journeys(journeys, example_tasks, speed_kmh=20.0, load_minutes=5)
    return to_document(scheduled, registry, PLAN_DATE, leftover_balance(example_tasks, scheduled))


@pytest.mark.parametrize("sentence", [
    "Central Park S & 6 Ave is the busiest stop of the morning.",
    "Truck 1 starts at Station Central Park S & 6 Ave and ends at broadway & e 14 st.",
    "All Trucks follow the Dispatch Report.",
])
def test_plan_stations_in_free_text_are_grounded(corner_plan, sentence):
    text = format_report(corner_plan).markdown + "\n" + sentence + "\n"
    result = ground_check(text, corner_plan)
    assert result, result.violations


@pytest.mark.parametrize("sentence, invented", [
    ("Also stage spare bikes at Station Park.", "Park"),
    ("Route via Station A.", "Station A"),
    ("Top up Madison Square Garden too.", "Madison Square Garden"),
    ("Send the spare bikes to amsterdam ave & w 72 st.", "amsterdam ave & w 72 st"),
    ("Then check W 53 St & 11 Ave.", "W 53 St & 11 Ave"),
])
def test_invented_station_in_free_text_is_reported(corner_plan, sentence, invented):
    text = format_report(corner_plan).markdown + "\n" + sentence + "\n"
    result = ground_check(text, corner_plan)
    assert not result
    assert any(invented in violation for violation in result.violations), result.violations


def test_prompt_grows_by_a_fixed_amount_per_leg():
    def plan_with_legs(count):
        legs = [
            {"station": f"Stop {idx}", "station_id": str(idx), "drop": 1, "dispatch_time": "07:00",
             "arrival_time": "08:00", "km": 1.5}
            for idx in range(1, count + 1)
        ]
        truck = {"truck_id": 1, "pickup": {"station": "Depot", "station_id": "0", "load": count},
                 "legs": legs, "total_km": 1.5 * count}
        return {"date": "2016-07-01", "trucks": [truck]}

    lengths = [len(build_prompt(plan_with_legs(count))) for count in range(1, 6)]
    steps = {later - earlier for earlier, later in zip(lengths, lengths[1:])}
    assert len(steps) == 1 and steps.pop() > 0


def test_km_must_match_to_two_decimals(example_plan):
    text = format_report(example_plan).markdown
    assert ground_check(text, example_plan)
    assert not ground_check(text.replace("Route distance: 3.00 km", "Route distance: 3.01 km"), example_plan)
    assert not ground_check(text + "\nThe longest leg is 2.004 km.\n", example_plan)


def test_prompt_embeds_the_plan_after_a_fixed_prefix(example_plan):
    prompt = build_prompt(example_plan)
    marker = "### Journey plan (JSON)\n"
    prefix, body = prompt.split(marker)
    assert body == plan_to_json(example_plan)
    assert "ONLY the data in the journey plan" in prefix
    other = build_prompt({"date": "2016-07-02", "trucks": []})
    assert other.split(marker)[0] == prefix


def test_unconfigured_endpoint_is_never_called(monkeypatch, example_plan, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("SMARTFLOW_LLM_URL", raising=False)

    def fail(*args, **kwargs):
        raise AssertionError("no request expected")

    monkeypatch.setattr(report_module.requests, "post", fail)
    assert generate_report(example_plan, LLMSettings()).source == SOURCE_DETERMINISTIC
    assert generate_report(example_plan).source == SOURCE_DETERMINISTIC


def test_faithful_completion_is_accepted(monkeypatch, example_plan, llm_settings):
    expected = format_report(example_plan)
    calls = []

    def post(url, json=None, headers=None, timeout=None):
        calls.append((url, json, headers, timeout))
        return completion(expected.markdown)

    monkeypatch.setattr(report_module.requests, "post", post)
    report = generate_report(example_plan, llm_settings)
    assert report.source == SOURCE_LLM
    assert report.markdown == expected.markdown

    [(url, body, headers, timeout)] = calls
    assert url == LLM_URL and timeout == 2.0
    assert headers["Authorization"] == "Bearer secret"
    assert body["temperature"] == 0 and body["model"] == llm_settings.model
    assert body["messages"][-1]["content"] == build_prompt(example_plan)


def _chaos_responses(plan):
    hallucinated = format_report(plan).markdown.replace("B Street", "Harbour Street")
    free_text = format_report(plan).markdown + "\nAlso top up Madison Square Garden before 09:00.\n"

    def timeout(*args, **kwargs):
        raise requests.Timeout("read timed out")

    def refused(*args, **kwargs):
        raise requests.ConnectionError("connection refused")

    return [
        timeout,
        refused,
        lambda *args, **kwargs: FakeResponse(status=500),
        lambda *args, **kwargs: FakeResponse(text="<html>bad gateway</html>"),
        lambda *args, **kwargs: FakeResponse({"choices": []}),
        lambda *args, **kwargs: FakeResponse({"result": "ok"}),
        lambda *args, **kwargs: completion(""),
        lambda *args, **kwargs: completion(hallucinated),
        lambda *args, **kwargs: completion(free_text),
    ]


def test_endpoint_failures_fall_back_deterministically(monkeypatch, example_plan, llm_settings):
    expected = format_report(example_plan).markdown
    responses = _chaos_responses(example_plan)
    rng = np.random.default_rng(0)
    for _ in range(100):
        monkeypatch.setattr(report_module.requests, "post", responses[int(rng.integers(len(responses)))])
        report = generate_report(example_plan, llm_settings)
        assert report.source == SOURCE_DETERMINISTIC
        assert report.markdown == expected


def test_write_report(tmp_path, example_plan):
    path = tmp_path / "report.md"
    format_report(example_plan).write(path)
    assert path.read_text(encoding="utf-8").startswith("# SmartFlow Dispatch Report — 2016-07-01\n")

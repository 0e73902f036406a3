"""Communication layer: dispatch reports for managers and truck crews.

The deterministic formatter is always available. When an LLM endpoint is
configured, its report is accepted only if ``ground_check`` finds nothing in
it that the journey plan does not contain; otherwise the formatter's output is
returned.
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Set, Tuple, Union

import requests

from smartflow.core.planner import JourneyPlan, plan_to_json, validate_plan
from smartflow.utils.settings import LLMSettings

logger = logging.getLogger(__name__)

SOURCE_DETERMINISTIC = "deterministic"
SOURCE_LLM = "llm"
EXEMPT_SMALL_NUMBER = 24

LEG_LINE = re.compile(r"^\s*[-*]?\s*(\d{2}:\d{2}) — (.+?) — drop (\d+) bikes?\s*$")
PICKUP_LINE = re.compile(r"^\s*[-*]?\s*Pickup: (.+?) — load (\d+) bikes?(?: — dispatch (\d{2}:\d{2}))?\s*$")
TIME_TOKEN = re.compile(r"\b\d{1,2}:\d{2}\b")
DATE_TOKEN = re.compile(r"\b\d{4}-\d{2}-\d{2}\b")
DECIMAL_TOKEN = re.compile(r"\b\d+\.\d+\b")
INTEGER_TOKEN = re.compile(r"\b\d+\b")
STATION_PHRASE = re.compile(r"\b[Ss]tation[ \t]+((?:[A-Z0-9][\w'&./-]*)(?:[ \t]+(?:&[ \t]+)?[A-Z0-9][\w'&./-]*)*)")
STREET_PAIR = re.compile(
    r"\b(?:[\w'./-]+[ \t]+){0,2}[\w'./-]+[ \t]+&[ \t]+[\w'./-]+(?:[ \t]+[\w'./-]+){0,2}"
)
CAPITALIZED_RUN = re.compile(r"\b[A-Z][\w'\u2019.-]*(?:[ \t]+[A-Z][\w'\u2019.-]*)+")
# capitalized words a faithful report may use outside station names
REPORT_VOCABULARY = frozenset(
    "smartflow dispatch report reports manager manager's managers briefing summary truck trucks ticket "
    "tickets pickup pickups route routes distance total totals drop drops load loads arrival arrivals "
    "journey plan tight schedule unserved balance surplus deficit bikes km note the a an all each every "
    "both first next then this today and of for on at to in by via with from after before".split()
)

PERSONA = (
    "You are SmartFlow, an autonomous Logistics Analyst for a bike-sharing operator. "
    "Your task is to write a manager's briefing and one dispatch ticket per truck "
    "from the journey plan below."
)
GROUNDING_RULE = (
    "NON-NEGOTIABLE RULE: use ONLY the data in the journey plan. Do not invent stations, "
    "quantities, times or distances, and do not round or convert any figure. If something "
    "is not in the plan, leave it out."
)
FORMAT_SPEC = """Required Markdown structure:
# SmartFlow Dispatch Report — <date>
## Manager's Briefing
<one paragraph: number of trucks, total bikes moved, total km with 2 decimals>
## Truck <truck_id>
- Pickup: <station> — load <load> bikes — dispatch <dispatch_time of the first leg>
- <arrival_time> — <station> — drop <drop> bikes
(one line per leg, in route order; finish with "Route distance: <total_km> km")"""


@dataclass
class DispatchReport:
    title: str
    manager_briefing: str
    tickets: List[str] = field(default_factory=list)
    source: str = SOURCE_DETERMINISTIC

    @property
    def markdown(self) -> str:
        sections = [self.title, "## Manager's Briefing\n\n" + self.manager_briefing, *self.tickets]
        return "\n\n".join(section.strip() for section in sections) + "\n"

    def write(self, path: Union[Path, str]):
        with open(path, "w", encoding="utf-8") as file:
            file.write(self.markdown)

    @classmethod
    def from_markdown(cls, text: str, source: str) -> "DispatchReport":
        """Splits free Markdown into title, briefing and per-truck sections."""
        title, briefing, tickets = "", "", []
        for block in re.split(r"(?m)^(?=## )", text.strip()):
            if block.startswith("# "):
                title = block.strip()
            elif block.lower().startswith("## manager"):
                briefing = block.split("\n", 1)[1].strip() if "\n" in block else ""
            elif block.startswith("## "):
                tickets.append(block.strip())
            else:
                title = title or block.strip()
        return cls(title=title, manager_briefing=briefing, tickets=tickets, source=source)


def _pickup_time(truck) -> str:
    return truck.legs[0].dispatch_time


def format_report(plan: Union[JourneyPlan, dict, str]) -> DispatchReport:
    """Deterministic Markdown report; identical input gives byte-identical output.

    Raises:
      PlanValidationError: when the plan does not match the journey schema
    """
    plan = validate_plan(plan)
    totals = plan.totals
    noun = "truck" if totals.trucks == 1 else "trucks"
    briefing = (
        f"{totals.trucks} {noun} dispatched for {plan.date}, moving {totals.bikes} bikes "
        f"over {totals.total_km:.2f} km in total."
    )
    if plan.leftover.surplus or plan.leftover.deficit:
        briefing += (
            f" Unserved balance: {plan.leftover.surplus} surplus bikes, "
            f"{plan.leftover.deficit} bikes of deficit."
        )
    tight = [truck.truck_id for truck in plan.trucks if truck.tight_schedule]
    if tight:
        briefing += " Tight schedule on truck " + ", ".join(str(truck_id) for truck_id in tight) + "."

    tickets = []
    for truck in plan.trucks:
        lines = [
            f"## Truck {truck.truck_id}",
            "",
            f"- Pickup: {truck.pickup.station} — load {truck.pickup.load} bikes — dispatch {_pickup_time(truck)}",
        ]
        lines.extend(f"- {leg.arrival_time} — {leg.station} — drop {leg.drop} bikes" for leg in truck.legs)
        lines.append("")
        lines.append(f"Route distance: {truck.total_km:.2f} km")
        tickets.append("\n".join(lines))

    return DispatchReport(
        title=f"# SmartFlow Dispatch Report — {plan.date}",
        manager_briefing=briefing,
        tickets=tickets,
        source=SOURCE_DETERMINISTIC,
    )


def build_prompt(plan: Union[JourneyPlan, dict, str]) -> str:
    """Persona and task, grounding rule, Markdown spec, then the plan JSON verbatim."""
    plan = validate_plan(plan)
    return "\n\n".join(
        [
            "### Persona and task\n" + PERSONA,
            "### Rules\n" + GROUNDING_RULE,
            "### Output format\n" + FORMAT_SPEC,
            "### Journey plan (JSON)\n" + plan_to_json(plan),
        ]
    )


@dataclass
class GroundingResult:
    passed: bool
    violations: List[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def _plan_facts(plan: JourneyPlan):
    names: Set[str] = set()
    times: Set[str] = set()
    kms: Set[str] = {f"{plan.totals.total_km:.2f}"}
    quantities: Set[int] = {plan.totals.bikes, plan.totals.trucks, plan.leftover.surplus, plan.leftover.deficit}
    legs: Set[Tuple[str, str, int]] = set()
    pickups: Set[Tuple[str, int]] = set()
    max_legs = 0
    for truck in plan.trucks:
        names.add(truck.pickup.station)
        quantities.add(truck.pickup.load)
        pickups.add((truck.pickup.station, truck.pickup.load))
        kms.add(f"{truck.total_km:.2f}")
        max_legs = max(max_legs, len(truck.legs))
        for leg in truck.legs:
            names.add(leg.station)
            times.update((leg.dispatch_time, leg.arrival_time))
            kms.add(f"{leg.km:.2f}")
            quantities.add(leg.drop)
            legs.add((leg.arrival_time, leg.station, leg.drop))
    exempt = set(range(0, plan.totals.trucks + 1)) | set(range(1, max_legs + 1))
    exempt = {number for number in exempt if number <= EXEMPT_SMALL_NUMBER}
    exempt.update(truck.truck_id for truck in plan.trucks)
    return names, times, kms, quantities, legs, pickups, exempt


def _blank_names(text: str, names: Set[str]) -> str:
    """Replaces whole-word occurrences of plan station names (longest first) with a space."""
    for name in sorted(names, key=len, reverse=True):
        text = re.sub(rf"(?<!\w){re.escape(name)}(?!\w)", " ", text, flags=re.IGNORECASE)
    return text


def _vocabulary_word(word: str) -> bool:
    return word.lower().replace("\u2019", "'").strip(".'-") in REPORT_VOCABULARY


def _unknown_places(remaining: str) -> List[str]:
    """Place-like phrases left once every plan station name has been blanked out."""
    found = [f"station not in plan: Station {phrase}" for phrase in STATION_PHRASE.findall(remaining)]
    for pair in STREET_PAIR.findall(remaining):
        found.append(f"station not in plan: {pair}")
    for run in CAPITALIZED_RUN.findall(remaining):
        if not all(_vocabulary_word(word) for word in run.split()):
            found.append(f"name not in plan: {run}")
    return found


def ground_check(report_text: str, plan: Union[JourneyPlan, dict, str]) -> GroundingResult:
    """Checks that every station, quantity, time and km figure in the text comes from the plan.

    Structured ticket lines (pickup and leg lines) must match a plan fact
    exactly. Plan station names are then blanked out as whole words and any
    place-like phrase left over is reported. Remaining tokens are checked
    against the plan's value sets: km to 2 decimals, HH:MM times, integer
    quantities (numbers <= 24 that match a truck count, truck id or leg index
    are exempt).
    """
    plan = validate_plan(plan)
    names, times, kms, quantities, legs, pickups, exempt = _plan_facts(plan)
    violations: List[str] = []

    for line in report_text.splitlines():
        leg_match = LEG_LINE.match(line)
        if leg_match:
            fact = (leg_match.group(1), leg_match.group(2).strip(), int(leg_match.group(3)))
            if fact not in legs:
                violations.append(f"leg line not in plan: {line.strip()}")
            continue
        pickup_match = PICKUP_LINE.match(line)
        if pickup_match:
            fact = (pickup_match.group(1).strip(), int(pickup_match.group(2)))
            if fact not in pickups:
                violations.append(f"pickup line not in plan: {line.strip()}")
            dispatch = pickup_match.group(3)
            if dispatch is not None and dispatch not in times:
                violations.append(f"time not in plan: {dispatch}")

    # station names may contain digits; blank them before scanning for numbers
    remaining = _blank_names(report_text, names)
    violations.extend(_unknown_places(remaining))

    for date in DATE_TOKEN.findall(remaining):
        if date != plan.date:
            violations.append(f"date not in plan: {date}")
    remaining = DATE_TOKEN.sub(" ", remaining)

    for clock in TIME_TOKEN.findall(remaining):
        if clock.zfill(5) not in times:
            violations.append(f"time not in plan: {clock}")
    remaining = TIME_TOKEN.sub(" ", remaining)

    for number in DECIMAL_TOKEN.findall(remaining):
        if f"{float(number):.2f}" not in kms or len(number.split(".")[1]) > 2:
            violations.append(f"km figure not in plan: {number}")
    remaining = DECIMAL_TOKEN.sub(" ", remaining)

    for number in INTEGER_TOKEN.findall(remaining):
        value = int(number)
        if value not in quantities and value not in exempt:
            violations.append(f"number not in plan: {number}")

    return GroundingResult(passed=not violations, violations=list(dict.fromkeys(violations)))


def _request_completion(prompt: str, settings: LLMSettings) -> str:
    headers = {"Content-Type": "application/json"}
    if settings.key:
        headers["Authorization"] = f"Bearer {settings.key}"
    body = {
        "model": settings.model,
        "messages": [
            {"role": "system", "content": PERSONA},
            {"role": "user", "content": prompt},
        ],
        "max_tokens": settings.max_tokens,
        "temperature": 0,
    }
    response = requests.post(settings.url, json=body, headers=headers, timeout=settings.timeout_seconds)
    response.raise_for_status()
    content = response.json()["choices"][0]["message"]["content"]
    if not isinstance(content, str) or not content.strip():
        raise ValueError("completion has no text content")
    return content


def generate_report(
    plan: Union[JourneyPlan, dict, str], settings: Optional[LLMSettings] = None
) -> DispatchReport:
    """LLM report when an endpoint is configured and its answer is grounded, else the formatter's.

    Only a plan schema violation is fatal; every endpoint failure falls back.
    """
    plan = validate_plan(plan)
    fallback = format_report(plan)
    if settings is None or not settings.configured:
        return fallback

    try:
        text = _request_completion(build_prompt(plan), settings)
    except requests.Timeout:
        logger.warning("LLM endpoint timed out after %ss; using deterministic report", settings.timeout_seconds)
        return fallback
    except requests.RequestException as exc:
        logger.warning("LLM endpoint failed (%s); using deterministic report", exc)
        return fallback
    except Exception as exc:  # pylint: disable=broad-except
        logger.warning("LLM response unusable (%s: %s); using deterministic report", type(exc).__name__, exc)
        return fallback

    grounding = ground_check(text, plan)
    if not grounding:
        logger.warning("LLM report failed grounding (%s); using deterministic report",
                       "; ".join(grounding.violations[:5]))
        return fallback
    return DispatchReport.from_markdown(text, SOURCE_LLM)

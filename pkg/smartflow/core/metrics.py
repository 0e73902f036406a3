"""Evaluation metrics of a run and their aggregation across seeds."""
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, validator

from smartflow.core.agent import LearningCurve
from smartflow.core.domain import NetworkState
from smartflow.core.exceptions import ContractViolation
from smartflow.core.planner import Journey, TransferTask

logger = logging.getLogger(__name__)

HOURS = 24
FLAG_ZERO_INITIAL_IMBALANCE = "initial_imbalance_zero"
FLAG_EMPTY_PLAN = "empty_plan"
FLAG_SINGLE_RUN = "single_run"

SUMMARY_ROWS = [
    ("imbalance_reduction", "Imbalance Reduction (%)"),
    ("total_km", "Total Fleet Distance (km)"),
    ("truck_utilization", "Truck Utilisation Rate (%)"),
    ("final_loss", "Final Policy Loss"),
    ("baseline_imbalance_reduction", "Random Policy Imbalance Reduction (%)"),
]
AGGREGATED_FIELDS = [
    "imbalance_initial",
    "imbalance_final",
    "imbalance_reduction",
    "total_km",
    "naive_km",
    "truck_utilization",
    "final_loss",
    "baseline_imbalance_reduction",
]


class FlaggedValue(NamedTuple):
    value: float
    flag: Optional[str] = None


def imbalance(state: Union[NetworkState, Sequence[int], np.ndarray], targets: Sequence[int]) -> int:
    """Sum over stations of |inventory - target|."""
    inventories = state.as_array() if isinstance(state, NetworkState) else np.asarray(state, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if inventories.shape != targets.shape:
        raise ContractViolation(f"{len(inventories)} inventories against {len(targets)} targets")
    return int(np.abs(inventories - targets).sum())


def imbalance_reduction(
    initial: Union[NetworkState, Sequence[int]],
    final: Union[NetworkState, Sequence[int]],
    targets: Sequence[int],
) -> FlaggedValue:
    """Percent of the initial imbalance removed; negative when the network got worse."""
    before = imbalance(initial, targets)
    after = imbalance(final, targets)
    if before == 0:
        return FlaggedValue(0.0, FLAG_ZERO_INITIAL_IMBALANCE)
    return FlaggedValue(100.0 * (before - after) / before)


def truck_utilization(journeys: Sequence[Journey]) -> FlaggedValue:
    """Share of journeys chaining two or more drops, in percent rounded to 2 decimals."""
    if not journeys:
        return FlaggedValue(0.0, FLAG_EMPTY_PLAN)
    multi_leg = sum(1 for journey in journeys if len(journey.legs) >= 2)
    return FlaggedValue(round(100.0 * multi_leg / len(journeys), 2))


def task_hour_density(tasks: Iterable[TransferTask]) -> List[int]:
    """Histogram of transfer tasks over their need hour."""
    histogram = np.zeros(HOURS, dtype=np.int64)
    for task in tasks:
        histogram[task.need_hour] += 1
    return histogram.tolist()


def total_fleet_km(journeys: Iterable[Journey]) -> float:
    return math.fsum(journey.total_km for journey in journeys)


class RunResult(BaseModel):
    seed: int
    imbalance_initial: int
    imbalance_final: int
    imbalance_reduction: float
    imbalance_flag: Optional[str] = None
    total_km: float
    naive_km: float = 0.0
    truck_utilization: float
    utilization_flag: Optional[str] = None
    trucks: int = 0
    tasks: int = 0
    final_loss: Optional[float] = None
    baseline_imbalance_reduction: Optional[float] = None
    task_hours: List[int]
    learning_curve: List[float] = []

    @validator("imbalance_initial", "imbalance_final")
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("imbalance cannot be negative")
        return value

    @validator("truck_utilization")
    def _percent(cls, value):
        if not 0.0 <= value <= 100.0:
            raise ValueError("truck_utilization must lie in [0, 100]")
        return value

    @validator("task_hours")
    def _one_bin_per_hour(cls, value):
        if len(value) != HOURS:
            raise ValueError(f"task_hours needs {HOURS} bins")
        return value

    @validator("final_loss")
    def _nan_is_absent(cls, value):
        if value is not None and not math.isfinite(value):
            return None
        return value


class MetricSummary(BaseModel):
    mean: Optional[float]
    std: Optional[float]
    n: int


class Aggregate(BaseModel):
    seeds: List[int]
    runs: int
    std_flag: Optional[str] = None
    metrics: Dict[str, MetricSummary]
    task_hours: List[int]


def _mean_std(values: Sequence[float]) -> MetricSummary:
    """Mean and n-1 standard deviation, both order-independent (fsum two-pass)."""
    n = len(values)
    if n == 0:
        return MetricSummary(mean=None, std=None, n=0)
    mean = math.fsum(values) / n
    if n < 2:
        return MetricSummary(mean=mean, std=None, n=n)
    variance = math.fsum((value - mean) ** 2 for value in values) / (n - 1)
    return MetricSummary(mean=mean, std=math.sqrt(variance), n=n)


def aggregate_task_density(results: Sequence[RunResult]) -> List[int]:
    return np.sum([result.task_hours for result in results], axis=0, dtype=np.int64).tolist()


def aggregate_runs(results: Sequence[RunResult]) -> Aggregate:
    """Per-metric mean and sample standard deviation; a single run has no std.

    Raises:
      ContractViolation: no results
    """
    if not results:
        raise ContractViolation("cannot aggregate an empty list of runs")
    results = sorted(results, key=lambda result: result.seed)
    metrics = {}
    for name in AGGREGATED_FIELDS:
        values = [float(getattr(result, name)) for result in results if getattr(result, name) is not None]
        metrics[name] = _mean_std(values)
    return Aggregate(
        seeds=[result.seed for result in results],
        runs=len(results),
        std_flag=FLAG_SINGLE_RUN if len(results) < 2 else None,
        metrics=metrics,
        task_hours=aggregate_task_density(results),
    )


def aggregate_learning_curves(curves: Sequence[Union[LearningCurve, Sequence[float]]]) -> pd.DataFrame:
    """Per-episode mean and sample std of the moving-average reward, cut to the shortest run."""
    if not curves:
        raise ContractViolation("cannot aggregate an empty list of learning curves")
    series = [curve.moving_average() if isinstance(curve, LearningCurve) else list(curve) for curve in curves]
    length = min(len(values) for values in series)
    stacked = pd.DataFrame({idx: values[:length] for idx, values in enumerate(series)})
    return pd.DataFrame(
        {
            "episode": np.arange(1, length + 1),
            "mean": stacked.mean(axis=1),
            "std": stacked.std(axis=1, ddof=1),
        }
    )


def _cell(summary: MetricSummary) -> str:
    if summary.mean is None:
        return "n/a"
    if summary.std is None:
        return f"{summary.mean:.2f}"
    return f"{summary.mean:.2f} ± {summary.std:.2f}"


def summary_table(aggregate: Aggregate) -> str:
    lines = [
        f"Aggregated metrics over {aggregate.runs} seeded run(s): " + ", ".join(map(str, aggregate.seeds)),
        "",
        "| Metric | Value (Mean ± Std Dev) |",
        "|---|---|",
    ]
    for name, label in SUMMARY_ROWS:
        lines.append(f"| {label} | {_cell(aggregate.metrics[name])} |")
    if aggregate.std_flag:
        lines.append("")
        lines.append("Standard deviation is absent: a single run was aggregated.")
    return "\n".join(lines) + "\n"


def _dump(document: dict, path: Path):
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file, indent=2, sort_keys=True)
        file.write("\n")


def write_run_result(result: RunResult, out_dir: Union[Path, str]) -> Path:
    path = Path(out_dir) / f"run_{result.seed}.json"
    _dump(result.dict(), path)
    return path


def read_run_result(path: Union[Path, str]) -> RunResult:
    return RunResult.parse_file(path)


def write_aggregate(aggregate: Aggregate, out_dir: Union[Path, str]) -> List[Path]:
    out_dir = Path(out_dir)
    json_path, md_path = out_dir / "aggregate.json", out_dir / "aggregate.md"
    _dump(aggregate.dict(), json_path)
    with open(md_path, "w", encoding="utf-8") as file:
        file.write(summary_table(aggregate))
    logger.info("Aggregate of %d runs written to %s", aggregate.runs, json_path)
    return [json_path, md_path]

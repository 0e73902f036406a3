"""Command-line workflow: prepare -> train -> simulate -> plan -> report / map, and run-all over seeds."""
import argparse
import datetime
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from smartflow import __version__
from smartflow.core.agent import greedy_policy, train
from smartflow.core.domain import StationRegistry, load_registry, save_registry
from smartflow.core.env import EpisodeLog, RebalancingEnv, RewardConstants, random_policy, rollout
from smartflow.core.exceptions import IngestError, SmartFlowError, TrainingError
from smartflow.core.ingest import (
    DemandProfile,
    build_demand_profile,
    load_stations,
    load_trips,
    select_top_k,
    subset_registry,
)
from smartflow.core.metrics import (
    RunResult,
    aggregate_learning_curves,
    aggregate_runs,
    imbalance,
    imbalance_reduction,
    summary_table,
    task_hour_density,
    total_fleet_km,
    truck_utilization,
    write_aggregate,
    write_run_result,
)
from smartflow.core.planner import (
    DistanceProvider,
    JourneyPlan,
    naive_round_trip_km,
    plan_episode,
    read_plan,
    validate_plan,
    write_plan,
)
from smartflow.core.qnetwork import load_checkpoint, save_checkpoint
from smartflow.core.report import generate_report
from smartflow.mocks.synthetic import DEFAULT_DATE, write_tidal_network
from smartflow.utils.settings import LLMSettings, SimConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

REGISTRY_FILE = "registry.csv"
PROFILE_FILE = "profile.csv"
CHECKPOINT_FILE = "checkpoint.json"
CURVE_FILE = "curve.csv"
EPISODE_FILE = "episode.jsonl"
PLAN_FILE = "plan.json"
REPORT_FILE = "report.md"
MAP_FILE = "map.geojson"
MANIFEST_FILE = "manifest.json"
CURVES_FILE = "curves.csv"
CONFIG_FILE = "smartflow.env"


class RunManifest(BaseModel):
    command: str
    seed: Optional[int] = None
    tool_version: str = __version__
    config: Dict
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    started_at: str
    finished_at: Optional[str] = None


def sha256_file(path: Path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as file:
        for chunk in iter(lambda: file.read(1 << 16), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_manifest(
    run_dir: Path,
    command: str,
    config: SimConfig,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    started_at: str,
    seed: Optional[int] = None,
) -> RunManifest:
    manifest = RunManifest(
        command=command,
        seed=seed,
        config=config.echo(),
        inputs={str(p): sha256_file(p) for p in inputs},
        outputs={str(p): sha256_file(p) for p in outputs},
        started_at=started_at,
        finished_at=_now(),
    )
    path = run_dir / f"{command}.{MANIFEST_FILE}"
    with open(path, "w", encoding="utf-8") as file:
        file.write(manifest.json(indent=2) + "\n")
    return manifest


def seed_dir(out_dir: Path, seed: int) -> Path:
    path = out_dir / f"seed_{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_env(config: SimConfig, registry: StationRegistry, profile: DemandProfile) -> RebalancingEnv:
    rewards = RewardConstants(config.reward_scale, config.reward_wasted, config.reward_infeasible)
    return RebalancingEnv(registry, profile, config.episode_hours, rewards)


def build_distances(config: SimConfig, registry: StationRegistry) -> DistanceProvider:
    if config.distance_matrix_path is not None:
        return DistanceProvider.from_matrix_csv(config.distance_matrix_path, registry.ids)
    return DistanceProvider.from_registry(registry, config.circuity_factor)


def _resolve(explicit: Optional[Path], configured: Optional[Path], fallback: Path) -> Path:
    for candidate in (explicit, configured):
        if candidate is not None:
            return Path(candidate)
    return fallback


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} '{path}' does not exist")
    return path


def _plan_date(config: SimConfig) -> datetime.date:
    if config.date is None:
        raise IngestError("a plan date is required: pass --date or set SMARTFLOW_DATE")
    return config.date


def _inputs(args, config: SimConfig):
    out_dir = Path(args.out_dir)
    registry_path = _require(_resolve(getattr(args, "registry", None), config.registry_path, out_dir / REGISTRY_FILE),
                             "registry")
    profile_path = _require(_resolve(getattr(args, "profile", None), config.profile_path, out_dir / PROFILE_FILE),
                            "demand profile")
    return registry_path, profile_path


def prepare_data(config: SimConfig, out_dir: Path) -> List[Path]:
    """Cleanses trips, selects the busiest stations and writes registry + demand profile."""
    if config.trips_path is None or config.stations_path is None:
        raise IngestError("prepare needs both a trips file and a stations file")
    date = _plan_date(config)
    stations = load_stations(_require(Path(config.stations_path), "stations file"))
    trips = load_trips(
        _require(Path(config.trips_path), "trips file"),
        config.min_trip_seconds,
        config.max_trip_seconds,
        known_station_ids=set(stations.ids),
    )
    selected = select_top_k(trips, config.top_k)
    registry = subset_registry(stations, selected)
    profile = build_demand_profile(trips, registry, date)

    out_dir.mkdir(parents=True, exist_ok=True)
    registry_path, profile_path = out_dir / REGISTRY_FILE, out_dir / PROFILE_FILE
    save_registry(registry, registry_path)
    profile.to_csv(profile_path)
    print(json.dumps({"dropped": trips.dropped, "kept": len(trips), "stations": len(registry)}, sort_keys=True))
    return [registry_path, profile_path]


def cmd_prepare(args, config: SimConfig) -> int:
    started = _now()
    out_dir = Path(args.out_dir)
    outputs = prepare_data(config, out_dir)
    write_manifest(out_dir, "prepare", config,
                   [Path(config.trips_path), Path(config.stations_path)], outputs, started)
    return EXIT_OK


def train_seed(config: SimConfig, registry_path: Path, profile_path: Path, seed: int, run_dir: Path):
    registry = load_registry(registry_path)
    profile = DemandProfile.from_csv(profile_path)
    env = build_env(config, registry, profile)
    result = train(env, config, seed)
    checkpoint_path, curve_path = run_dir / CHECKPOINT_FILE, run_dir / CURVE_FILE
    save_checkpoint(result.net, checkpoint_path, config.echo(), registry.ids)
    result.curve.to_csv(curve_path)
    return result, [checkpoint_path, curve_path]


def cmd_train(args, config: SimConfig) -> int:
    started = _now()
    registry_path, profile_path = _inputs(args, config)
    run_dir = seed_dir(Path(args.out_dir), args.seed)
    _, outputs = train_seed(config, registry_path, profile_path, args.seed, run_dir)
    write_manifest(run_dir, "train", config, [registry_path, profile_path], outputs, started,
                   args.seed)
    return EXIT_OK


def simulate_seed(config: SimConfig, registry_path: Path, profile_path: Path, checkpoint_path: Path, seed: int,
                  run_dir: Path) -> EpisodeLog:
    registry = load_registry(registry_path)
    env = build_env(config, registry, DemandProfile.from_csv(profile_path))
    net = load_checkpoint(checkpoint_path, expected_stations=len(registry))
    log = rollout(env, greedy_policy(net), seed)
    log.to_jsonl(run_dir / EPISODE_FILE)
    return log


def cmd_simulate(args, config: SimConfig) -> int:
    started = _now()
    registry_path, profile_path = _inputs(args, config)
    run_dir = seed_dir(Path(args.out_dir), args.seed)
    checkpoint_path = _require(Path(args.checkpoint or run_dir / CHECKPOINT_FILE), "checkpoint")
    simulate_seed(config, registry_path, profile_path, checkpoint_path, args.seed, run_dir)
    write_manifest(run_dir, "simulate", config, [registry_path, profile_path, checkpoint_path],
                   [run_dir / EPISODE_FILE], started, args.seed)
    return EXIT_OK


def cmd_plan(args, config: SimConfig) -> int:
    started = _now()
    out_dir = Path(args.out_dir)
    run_dir = seed_dir(out_dir, args.seed)
    registry_path = _require(_resolve(args.registry, config.registry_path, out_dir / REGISTRY_FILE), "registry")
    episode_path = _require(Path(args.episode or run_dir / EPISODE_FILE), "episode log")
    registry = load_registry(registry_path)
    _, _, document = plan_episode(
        EpisodeLog.from_jsonl(episode_path, registry), registry, build_distances(config, registry), _plan_date(config),
        config.truck_capacity, config.truck_speed_kmh, config.load_minutes_per_stop,
    )
    plan_path = run_dir / PLAN_FILE
    write_plan(document, plan_path)
    write_manifest(run_dir, "plan", config, [registry_path, episode_path], [plan_path], started,
                   args.seed)
    return EXIT_OK


def cmd_report(args, config: SimConfig) -> int:
    started = _now()
    run_dir = seed_dir(Path(args.out_dir), args.seed)
    plan_path = _require(Path(args.plan or run_dir / PLAN_FILE), "plan")
    report = generate_report(read_plan(plan_path), LLMSettings())
    report_path = run_dir / REPORT_FILE
    report.write(report_path)
    logger.info("Report (%s) written to %s", report.source, report_path)
    write_manifest(run_dir, "report", config, [plan_path], [report_path], started, args.seed)
    return EXIT_OK


def build_geojson(plan: JourneyPlan, registry: StationRegistry, log: Optional[EpisodeLog] = None) -> dict:
    """One Point per station and one LineString per truck route (pickup, then drops in order)."""
    plan = validate_plan(plan)
    features = []
    for idx, station in enumerate(registry):
        properties = {"station_id": station.id, "name": station.name, "target": station.target,
                      "capacity": station.capacity}
        if log is not None:
            properties["initial_inventory"] = log.initial.inventories[idx]
            properties["final_inventory"] = (log.final or log.initial).inventories[idx]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [station.lon, station.lat]},
            "properties": properties,
        })
    for truck in plan.trucks:
        stops = [truck.pickup.station_id] + [leg.station_id for leg in truck.legs]
        coordinates = []
        for station_id in stops:
            station = registry[registry.index_of(station_id)]
            coordinates.append([station.lon, station.lat])
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coordinates},
            "properties": {"truck_id": truck.truck_id, "load": truck.pickup.load, "total_km": truck.total_km,
                           "dispatch_time": truck.legs[0].dispatch_time, "tight_schedule": truck.tight_schedule},
        })
    return {"type": "FeatureCollection", "features": features}


def write_geojson(document: dict, path: Path):
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file, indent=2, ensure_ascii=False)
        file.write("\n")


def cmd_map(args, config: SimConfig) -> int:
    started = _now()
    out_dir = Path(args.out_dir)
    run_dir = seed_dir(out_dir, args.seed)
    plan_path = _require(Path(args.plan or run_dir / PLAN_FILE), "plan")
    registry_path = _require(_resolve(args.registry, config.registry_path, out_dir / REGISTRY_FILE), "registry")
    episode_path = Path(args.episode or run_dir / EPISODE_FILE)
    registry = load_registry(registry_path)
    log = EpisodeLog.from_jsonl(episode_path, registry) if episode_path.exists() else None
    map_path = run_dir / MAP_FILE
    write_geojson(build_geojson(read_plan(plan_path), registry, log), map_path)
    inputs = [plan_path, registry_path] + ([episode_path] if log is not None else [])
    write_manifest(run_dir, "map", config, inputs, [map_path], started, args.seed)
    return EXIT_OK


def run_seed(config: SimConfig, registry_path: Path, profile_path: Path, seed: int, out_dir: Path) -> RunResult:
    """Full pipeline for one seed; depends only on its arguments so seeds can run in separate processes."""
    started = _now()
    logger.info("Seed %d started", seed)
    run_dir = seed_dir(out_dir, seed)
    result, outputs = train_seed(config, registry_path, profile_path, seed, run_dir)
    log = simulate_seed(config, registry_path, profile_path, run_dir / CHECKPOINT_FILE, seed, run_dir)

    registry = load_registry(registry_path)
    distances = build_distances(config, registry)
    tasks, journeys, document = plan_episode(
        log, registry, distances, _plan_date(config),
        config.truck_capacity, config.truck_speed_kmh, config.load_minutes_per_stop,
    )
    write_plan(document, run_dir / PLAN_FILE)
    generate_report(document, LLMSettings()).write(run_dir / REPORT_FILE)
    write_geojson(build_geojson(document, registry, log), run_dir / MAP_FILE)

    env = build_env(config, registry, DemandProfile.from_csv(profile_path))
    baseline = rollout(env, random_policy(np.random.default_rng(seed), env.n_actions), seed)
    reduction = imbalance_reduction(log.initial, log.final, registry.targets)
    utilization = truck_utilization(journeys)
    run_result = RunResult(
        seed=seed,
        imbalance_initial=imbalance(log.initial, registry.targets),
        imbalance_final=imbalance(log.final, registry.targets),
        imbalance_reduction=reduction.value,
        imbalance_flag=reduction.flag,
        total_km=round(total_fleet_km(journeys), 2),
        naive_km=round(naive_round_trip_km(tasks, distances, config.truck_capacity), 2),
        truck_utilization=utilization.value,
        utilization_flag=utilization.flag,
        trucks=len(journeys),
        tasks=len(tasks),
        final_loss=result.final_loss,
        baseline_imbalance_reduction=imbalance_reduction(baseline.initial, baseline.final, registry.targets).value,
        task_hours=task_hour_density(tasks),
        learning_curve=result.curve.moving_average(),
    )
    run_path = write_run_result(run_result, out_dir)
    outputs += [run_dir / name for name in (EPISODE_FILE, PLAN_FILE, REPORT_FILE, MAP_FILE)] + [run_path]
    write_manifest(run_dir, "run-all", config, [registry_path, profile_path], outputs, started, seed)
    logger.info("Seed %d finished: imbalance reduction %.2f%%, %d trucks", seed, reduction.value, len(journeys))
    return run_result


def run_all(config: SimConfig, out_dir: Path, workers: int = 1):
    """Runs every configured seed and aggregates the completed ones in seed order.

    Returns:
      (results, failed seeds); the aggregate is written only when no seed failed
    """
    _plan_date(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.trips_path is not None and config.stations_path is not None:
        registry_path, profile_path = prepare_data(config, out_dir)
    else:
        registry_path = _require(Path(config.registry_path or out_dir / REGISTRY_FILE), "registry")
        profile_path = _require(Path(config.profile_path or out_dir / PROFILE_FILE), "demand profile")

    seeds = sorted(set(config.seeds))
    results: Dict[int, RunResult] = {}
    failed: List[int] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(run_seed, config, registry_path, profile_path, seed, out_dir)
                       for seed in seeds}
            for seed, future in futures.items():
                try:
                    results[seed] = future.result()
                except Exception as exc:  # pylint: disable=broad-except
                    logger.error("Seed %d failed: %s", seed, exc)
                    failed.append(seed)
    else:
        for seed in seeds:
            try:
                results[seed] = run_seed(config, registry_path, profile_path, seed, out_dir)
            except Exception as exc:  # pylint: disable=broad-except
                logger.error("Seed %d failed: %s", seed, exc)
                failed.append(seed)

    ordered = [results[seed] for seed in seeds if seed in results]
    if failed:
        logger.error("Aggregate skipped: seeds %s failed, %d run files kept", failed, len(ordered))
        return ordered, failed

    aggregate = aggregate_runs(ordered)
    write_aggregate(aggregate, out_dir)
    curves = [result.learning_curve for result in ordered if result.learning_curve]
    if curves:
        aggregate_learning_curves(curves).to_csv(out_dir / CURVES_FILE, index=False, lineterminator="\n")
    print(summary_table(aggregate), end="")
    return ordered, failed


def cmd_run_all(args, config: SimConfig) -> int:
    _, failed = run_all(config, Path(args.out_dir), config.workers)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_synth(args, config: SimConfig) -> int:
    """Writes a five-station tidal network and a config file pointing at it."""
    out_dir = Path(args.out_dir)
    paths = write_tidal_network(out_dir, args.seed, args.trips)
    lines = [
        f"SMARTFLOW_REGISTRY_PATH={paths['registry'].resolve()}",
        f"SMARTFLOW_PROFILE_PATH={paths['profile'].resolve()}",
        f"SMARTFLOW_DATE={DEFAULT_DATE.isoformat()}",
        "SMARTFLOW_TOP_K=5",
    ]
    with open(out_dir / CONFIG_FILE, "w", encoding="utf-8") as file:
        file.write("\n".join(lines) + "\n")
    logger.info("Synthetic network written to %s", out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key/value config file (SMARTFLOW_* keys)")
    common.add_argument("--seed", type=int, default=None, help="run seed (default: first configured seed)")
    common.add_argument("--out-dir", default="runs", help="artifact directory (default: runs)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    common.add_argument("--date", default=None, help="representative day, YYYY-MM-DD")
    common.add_argument("--timesteps", type=int, default=None, help="override total_timesteps")

    parser = argparse.ArgumentParser(prog="smartflow", description="Bike-sharing rebalancing lab")
    commands = parser.add_subparsers(dest="command", required=True)

    prepare = commands.add_parser("prepare", parents=[common], help="cleanse trips, build registry and profile")
    prepare.add_argument("--trips", type=Path, default=None)
    prepare.add_argument("--stations", type=Path, default=None)
    prepare.add_argument("--k", type=int, default=None, help="number of busiest stations")
    prepare.set_defaults(func=cmd_prepare)

    for name, func, help_text in (
        ("train", cmd_train, "train a DQN for one seed"),
        ("simulate", cmd_simulate, "greedy rollout of a checkpoint"),
    ):
        command = commands.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--registry", type=Path, default=None)
        command.add_argument("--profile", type=Path, default=None)
        if name == "simulate":
            command.add_argument("--checkpoint", type=Path, default=None)
        command.set_defaults(func=func)

    plan = commands.add_parser("plan", parents=[common], help="turn an episode log into truck journeys")
    plan.add_argument("--episode", type=Path, default=None)
    plan.add_argument("--registry", type=Path, default=None)
    plan.set_defaults(func=cmd_plan)

    report = commands.add_parser("report", parents=[common], help="write the dispatch report for a plan")
    report.add_argument("--plan", type=Path, default=None)
    report.set_defaults(func=cmd_report)

    map_ = commands.add_parser("map", parents=[common], help="export stations and routes as GeoJSON")
    map_.add_argument("--plan", type=Path, default=None)
    map_.add_argument("--registry", type=Path, default=None)
    map_.add_argument("--episode", type=Path, default=None)
    map_.set_defaults(func=cmd_map)

    run = commands.add_parser("run-all", parents=[common], help="full pipeline for every configured seed")
    run.add_argument("--workers", type=int, default=None, help="parallel seed processes")
    run.set_defaults(func=cmd_run_all)

    synth = commands.add_parser("synth", parents=[common], help="write a synthetic tidal network")
    synth.add_argument("--trips", type=int, default=None, help="also write this many synthetic trips")
    synth.set_defaults(func=cmd_synth)
    return parser


def load_config(args) -> SimConfig:
    overrides = {
        "date": args.date,
        "total_timesteps": args.timesteps,
        "trips_path": getattr(args, "trips", None) if args.command == "prepare" else None,
        "stations_path": getattr(args, "stations", None),
        "top_k": getattr(args, "k", None),
        "workers": getattr(args, "workers", None),
    }
    return SimConfig.load(args.config, **overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = load_config(args)
        if args.seed is None:
            args.seed = config.seeds[0]
        return args.func(args, config)
    except TrainingError as exc:
        logger.error("Training aborted: %s", exc)
        return EXIT_RUNTIME
    except (SmartFlowError, ValidationError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except Exception as exc:  # pylint: disable=broad-except
        logger.exception("Unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

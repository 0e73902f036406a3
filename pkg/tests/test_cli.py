import json
from pathlib import Path

import pytest

from smartflow.cli import EXIT_INPUT, EXIT_OK, build_geojson, main, sha256_file
from smartflow.core.domain import load_registry, save_registry
from smartflow.core.planner import read_plan, validate_plan

from tests.conftest import make_registry, zero_profile

SMALL_RUN = [
    "SMARTFLOW_SEEDS=[0,1,2]",
    "SMARTFLOW_HIDDEN_SIZES=[16]",
    "SMARTFLOW_TOTAL_TIMESTEPS=240",
    "SMARTFLOW_LEARNING_STARTS=24",
    "SMARTFLOW_BATCH_SIZE=8",
    "SMARTFLOW_BUFFER_CAPACITY=100",
    "SMARTFLOW_TARGET_SYNC_INTERVAL=50",
    "SMARTFLOW_LEARNING_RATE=0.001",
    "SMARTFLOW_EPSILON_DECAY_FRACTION=0.5",
    "SMARTFLOW_MOVING_AVERAGE_WINDOW=3",
]


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for name in ("SEEDS", "DATE", "WORKERS", "REGISTRY_PATH", "PROFILE_PATH", "TOTAL_TIMESTEPS", "LLM_URL"):
        monkeypatch.delenv(f"SMARTFLOW_{name}", raising=False)


@pytest.fixture
def network(tmp_path):
    """Synthetic tidal network plus a small-run config file pointing at it."""
    data_dir = tmp_path / "data"
    assert main(["synth", "--out-dir", str(data_dir), "--seed", "0", "--trips", "2000"]) == EXIT_OK
    config = data_dir / "smartflow.env"
    with open(config, "a", encoding="utf-8") as file:
        file.write("\n".join(SMALL_RUN) + "\n")
    return data_dir, config


def run_all(config, out_dir, *extra):
    return main(["run-all", "--config", str(config), "--out-dir", str(out_dir), *extra])


def test_synth_writes_a_usable_config(network):
    data_dir, config = network
    text = config.read_text(encoding="utf-8")
    assert "SMARTFLOW_DATE=2016-07-01" in text
    assert len(load_registry(data_dir / "registry.csv")) == 5
    assert (data_dir / "trips.csv").exists()


def test_run_all_writes_runs_and_aggregate(network, tmp_path, capsys):
    _, config = network
    out_dir = tmp_path / "runs"
    assert run_all(config, out_dir) == EXIT_OK
    for seed in (0, 1, 2):
        assert (out_dir / f"run_{seed}.json").exists()
        for name in ("checkpoint.json", "curve.csv", "episode.jsonl", "plan.json", "report.md", "map.geojson",
                     "run-all.manifest.json"):
            assert (out_dir / f"seed_{seed}" / name).exists()
    aggregate = json.loads((out_dir / "aggregate.json").read_text())
    assert aggregate["seeds"] == [0, 1, 2] and aggregate["runs"] == 3
    assert aggregate["std_flag"] is None
    assert (out_dir / "curves.csv").exists()
    assert "| Metric | Value (Mean ± Std Dev) |" in capsys.readouterr().out

    plan = read_plan(out_dir / "seed_0" / "plan.json")
    geojson = json.loads((out_dir / "seed_0" / "map.geojson").read_text())
    assert len(geojson["features"]) == 5 + len(plan.trucks)


def test_run_all_manifest_lists_every_file_with_its_hash(network, tmp_path):
    _, config = network
    out_dir = tmp_path / "runs"
    assert run_all(config, out_dir) == EXIT_OK
    manifest = json.loads((out_dir / "seed_0" / "run-all.manifest.json").read_text())
    assert manifest["command"] == "run-all" and manifest["seed"] == 0
    assert manifest["inputs"] and manifest["finished_at"]
    names = {Path(path).name for path in manifest["outputs"]}
    assert names >= {"checkpoint.json", "curve.csv", "episode.jsonl", "plan.json", "report.md", "map.geojson",
                     "run_0.json"}
    for path, digest in {**manifest["inputs"], **manifest["outputs"]}.items():
        assert Path(path).exists(), path
        assert sha256_file(Path(path)) == digest, path


def test_run_all_is_reproducible(network, tmp_path):
    _, config = network
    first, second = tmp_path / "first", tmp_path / "second"
    assert run_all(config, first) == EXIT_OK
    assert run_all(config, second) == EXIT_OK
    for name in ("seed_0/checkpoint.json", "seed_1/plan.json", "seed_2/report.md", "aggregate.json", "run_1.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_parallel_seeds_match_sequential(network, tmp_path):
    _, config = network
    sequential, parallel = tmp_path / "sequential", tmp_path / "parallel"
    assert run_all(config, sequential) == EXIT_OK
    assert run_all(config, parallel, "--workers", "2") == EXIT_OK
    assert (sequential / "aggregate.json").read_bytes() == (parallel / "aggregate.json").read_bytes()


def test_single_seed_flags_missing_spread(network, tmp_path, monkeypatch):
    _, config = network
    monkeypatch.setenv("SMARTFLOW_SEEDS", "[4]")
    out_dir = tmp_path / "single"
    assert run_all(config, out_dir) == EXIT_OK
    aggregate = json.loads((out_dir / "aggregate.json").read_text())
    assert aggregate["std_flag"] == "single_run"
    assert aggregate["metrics"]["imbalance_reduction"]["std"] is None


def test_prepare_is_byte_identical_on_rerun(network, tmp_path, capsys):
    data_dir, _ = network
    outputs = []
    for name in ("first", "second"):
        out_dir = tmp_path / name
        argv = ["prepare", "--trips", str(data_dir / "trips.csv"), "--stations", str(data_dir / "stations.csv"),
                "--k", "5", "--date", "2016-07-01", "--out-dir", str(out_dir)]
        assert main(argv) == EXIT_OK
        outputs.append(out_dir)
    for name in ("registry.csv", "profile.csv"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
    counts = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert counts["stations"] == 5 and counts["kept"] == 2000
    assert (outputs[0] / "prepare.manifest.json").exists()


def test_prepare_with_a_missing_file(network, tmp_path):
    data_dir, _ = network
    argv = ["prepare", "--trips", str(tmp_path / "nope.csv"), "--stations", str(data_dir / "stations.csv"),
            "--date", "2016-07-01", "--out-dir", str(tmp_path / "out")]
    assert main(argv) == EXIT_INPUT


def test_run_all_without_a_date(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["synth", "--out-dir", str(data_dir)]) == EXIT_OK
    argv = ["run-all", "--out-dir", str(data_dir), "--timesteps", "0"]
    assert main(argv) == EXIT_INPUT


def test_train_with_a_missing_profile(network, tmp_path):
    data_dir, config = network
    argv = ["train", "--config", str(config), "--out-dir", str(tmp_path / "out"),
            "--profile", str(tmp_path / "missing.csv")]
    assert main(argv) == EXIT_INPUT


def test_train_then_simulate(network, tmp_path):
    _, config = network
    out_dir = tmp_path / "out"
    common = ["--config", str(config), "--out-dir", str(out_dir), "--seed", "3"]
    assert main(["train", *common]) == EXIT_OK
    assert main(["simulate", *common]) == EXIT_OK
    episode = out_dir / "seed_3" / "episode.jsonl"
    assert len(episode.read_text().splitlines()) == 24
    assert (out_dir / "seed_3" / "simulate.manifest.json").exists()

    assert main(["plan", *common]) == EXIT_OK
    assert main(["report", *common]) == EXIT_OK
    assert main(["map", *common]) == EXIT_OK
    report = (out_dir / "seed_3" / "report.md").read_text(encoding="utf-8")
    assert report.startswith("# SmartFlow Dispatch Report — 2016-07-01")


def test_simulate_rejects_a_checkpoint_for_another_network(network, tmp_path):
    _, config = network
    out_dir = tmp_path / "out"
    assert main(["train", "--config", str(config), "--out-dir", str(out_dir), "--seed", "0"]) == EXIT_OK

    small = make_registry([10, 10, 10, 10])
    registry_path, profile_path = tmp_path / "small_registry.csv", tmp_path / "small_profile.csv"
    save_registry(small, registry_path)
    zero_profile(small).to_csv(profile_path)
    argv = ["simulate", "--config", str(config), "--out-dir", str(out_dir), "--seed", "0",
            "--registry", str(registry_path), "--profile", str(profile_path),
            "--checkpoint", str(out_dir / "seed_0" / "checkpoint.json")]
    assert main(argv) == EXIT_INPUT


def test_all_negative_episode_plans_no_trucks(network, tmp_path):
    data_dir, config = network
    rows = [
        {"hour": hour, "source": 0, "dest": 1, "reward": -1.0, "feasible": True, "need_served": 0,
         "inventories_before": [10] * 5, "inventories_after": [10] * 5}
        for hour in range(24)
    ]
    episode = tmp_path / "episode.jsonl"
    episode.write_text("".join(json.dumps(row) + "\n" for row in rows))
    out_dir = tmp_path / "out"
    common = ["--config", str(config), "--out-dir", str(out_dir), "--seed", "0"]
    assert main(["plan", *common, "--episode", str(episode)]) == EXIT_OK
    plan = read_plan(out_dir / "seed_0" / "plan.json")
    assert plan.trucks == [] and plan.totals.trucks == 0

    assert main(["map", *common, "--episode", str(episode)]) == EXIT_OK
    geojson = json.loads((out_dir / "seed_0" / "map.geojson").read_text())
    assert [feature["geometry"]["type"] for feature in geojson["features"]] == ["Point"] * 5


def test_plan_rejects_an_episode_from_another_network(network, tmp_path):
    _, config = network
    rows = [
        {"hour": hour, "source": 0, "dest": 1, "reward": 0.1, "feasible": True, "need_served": 0,
         "inventories_before": [10] * 4, "inventories_after": [10] * 4}
        for hour in range(24)
    ]
    episode = tmp_path / "episode.jsonl"
    episode.write_text("".join(json.dumps(row) + "\n" for row in rows))
    argv = ["plan", "--config", str(config), "--out-dir", str(tmp_path / "out"), "--seed", "0",
            "--episode", str(episode)]
    assert main(argv) == EXIT_INPUT


def test_geojson_routes(example_plan, registry):
    document = build_geojson(example_plan, registry)
    lines = [feature for feature in document["features"] if feature["geometry"]["type"] == "LineString"]
    assert len(document["features"]) == 3 + 1
    [route] = lines
    assert route["geometry"]["coordinates"] == [[station.lon, station.lat] for station in registry]
    assert route["properties"]["truck_id"] == 1 and route["properties"]["load"] == 3


def test_geojson_of_an_empty_plan(registry):
    document = build_geojson(validate_plan({"date": "2016-07-01", "trucks": []}), registry)
    assert len(document["features"]) == 3

import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseSettings, validator, root_validator


class SimConfig(BaseSettings):
    """Every tunable of a training / planning run.

    Values come from field defaults, then a ``KEY=value`` config file passed as
    ``_env_file``, then ``SMARTFLOW_*`` environment variables, then keyword
    overrides (CLI flags), which win.
    """

    # learning
    gamma: float = 0.99
    learning_rate: float = 1e-4
    buffer_capacity: int = 50_000
    batch_size: int = 64
    learning_starts: int = 1_000
    train_freq: int = 4
    target_sync_interval: int = 1_000
    hidden_sizes: Tuple[int, ...] = (128, 128)
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.1
    total_timesteps: int = 1_000_000
    moving_average_window: int = 100

    # simulation
    episode_hours: int = 24
    reward_scale: float = 1.0
    reward_wasted: float = -1.0
    reward_infeasible: float = -10.0

    # fleet
    truck_capacity: int = 20
    truck_speed_kmh: float = 20.0
    circuity_factor: float = 1.3
    load_minutes_per_stop: int = 5

    # data preparation
    min_trip_seconds: int = 60
    max_trip_seconds: int = 86_400
    top_k: int = 30
    date: Optional[datetime.date] = None
    trips_path: Optional[Path] = None
    stations_path: Optional[Path] = None
    registry_path: Optional[Path] = None
    profile_path: Optional[Path] = None
    distance_matrix_path: Optional[Path] = None

    # orchestration
    seeds: List[int] = [0, 1, 2]
    workers: int = 1

    class Config:
        env_prefix = "SMARTFLOW_"
        env_file_encoding = "utf-8"

    @validator("gamma")
    def _gamma_in_unit_interval(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError("gamma must lie strictly between 0 and 1")
        return value

    @validator("learning_rate", "truck_speed_kmh")
    def _strictly_positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @validator("batch_size", "train_freq", "target_sync_interval", "truck_capacity", "top_k", "workers",
               "moving_average_window")
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @validator("learning_starts", "total_timesteps", "load_minutes_per_stop", "min_trip_seconds")
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    @validator("hidden_sizes")
    def _hidden_sizes_positive(cls, value):
        if any(size < 1 for size in value):
            raise ValueError("hidden layer sizes must be >= 1")
        return value

    @validator("epsilon_decay_fraction")
    def _fraction(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("epsilon_decay_fraction must lie in [0, 1]")
        return value

    @validator("episode_hours")
    def _episode_within_a_day(cls, value):
        if not 1 <= value <= 24:
            raise ValueError("episode_hours must lie in [1, 24]")
        return value

    @validator("circuity_factor")
    def _circuity(cls, value):
        if value < 1.0:
            raise ValueError("circuity_factor must be >= 1")
        return value

    @validator("seeds")
    def _seeds_present(cls, value):
        if not value:
            raise ValueError("at least one seed is required")
        return value

    @root_validator(skip_on_failure=True)
    def _cross_field_checks(cls, values):
        if values["buffer_capacity"] < values["batch_size"]:
            raise ValueError("buffer_capacity must be >= batch_size")
        if not values["epsilon_start"] >= values["epsilon_end"] >= 0.0:
            raise ValueError("epsilon_start >= epsilon_end >= 0 must hold")
        if values["max_trip_seconds"] <= values["min_trip_seconds"]:
            raise ValueError("max_trip_seconds must exceed min_trip_seconds")
        return values

    @classmethod
    def load(cls, config_path: Optional[Path] = None, **overrides: Any) -> "SimConfig":
        """Builds the config from an optional key/value file plus overrides.

        ``None`` overrides are dropped so that unset CLI flags never mask the file.
        """
        overrides = {key: value for key, value in overrides.items() if value is not None}
        if config_path is not None:
            if not Path(config_path).exists():
                raise FileNotFoundError(f"config file '{config_path}' does not exist")
            return cls(_env_file=str(config_path), **overrides)
        return cls(**overrides)

    def echo(self) -> Dict[str, Any]:
        """JSON-safe, key-sorted copy of the config for checkpoints and manifests."""
        echoed = {}
        for key, value in sorted(self.dict().items()):
            if isinstance(value, (Path, datetime.date)):
                value = str(value)
            elif isinstance(value, tuple):
                value = list(value)
            echoed[key] = value
        return echoed


class LLMSettings(BaseSettings):
    """Endpoint used by the report layer; unset ``url`` means deterministic reports only."""

    url: Optional[str] = None
    key: Optional[str] = None
    model: str = "gemma-2b-it"
    timeout_seconds: float = 30.0
    max_tokens: int = 1024

    class Config:
        env_prefix = "SMARTFLOW_LLM_"
        env_file = ".env"
        env_file_encoding = "utf-8"

    @property
    def configured(self) -> bool:
        return bool(self.url)

__version__ = "0.1.0"

from smartflow.core.domain import Action, NetworkState, Station, StationRegistry
from smartflow.core.env import RebalancingEnv
from smartflow.core.planner import JourneyPlan
from smartflow.utils.settings import LLMSettings, SimConfig

__all__ = [
    "Action",
    "JourneyPlan",
    "LLMSettings",
    "NetworkState",
    "RebalancingEnv",
    "SimConfig",
    "Station",
    "StationRegistry",
]

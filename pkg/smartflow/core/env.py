"""Hourly digital twin of the bike network.

One ``step`` = validate the agent's single-bike transfer, execute it if
feasible, apply one hour of public demand, clip to capacity, score the move
and advance the clock.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from smartflow.core.domain import (
    Action,
    NetworkState,
    StationRegistry,
    action_space_size,
    decode_action,
    need,
)
from smartflow.core.exceptions import ContractViolation
from smartflow.core.ingest import DemandProfile

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray, NetworkState], int]


@dataclass(frozen=True)
class RewardConstants:
    scale: float = 1.0
    wasted: float = -1.0
    infeasible: float = -10.0


@dataclass(frozen=True)
class StepInfo:
    action_feasible: bool
    need_served: int
    hour_executed: int


@dataclass(frozen=True)
class StepOutcome:
    next_state: NetworkState
    reward: float
    done: bool
    info: StepInfo


@dataclass(frozen=True)
class EpisodeStep:
    state: NetworkState
    action: Action
    reward: float
    info: StepInfo
    inventories_after: tuple


@dataclass
class EpisodeLog:
    initial: NetworkState
    steps: List[EpisodeStep] = field(default_factory=list)
    final: Optional[NetworkState] = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return float(sum(step.reward for step in self.steps))

    def to_rows(self) -> List[Dict]:
        return [
            {
                "hour": step.info.hour_executed,
                "source": step.action.source,
                "dest": step.action.dest,
                "reward": step.reward,
                "feasible": step.info.action_feasible,
                "need_served": step.info.need_served,
                "inventories_before": list(step.state.inventories),
                "inventories_after": list(step.inventories_after),
            }
            for step in self.steps
        ]

    def to_jsonl(self, path: Union[Path, str]):
        with open(path, "w", encoding="utf-8") as file:
            for row in self.to_rows():
                file.write(json.dumps(row) + "\n")

    @classmethod
    def from_jsonl(cls, path: Union[Path, str], registry: Optional[StationRegistry] = None) -> "EpisodeLog":
        """Reads a log written by ``to_jsonl``; with a registry every recorded state is checked against it."""
        with open(path, "r", encoding="utf-8") as file:
            rows = [json.loads(line) for line in file if line.strip()]
        if not rows:
            raise ContractViolation(f"episode log '{path}' is empty")
        steps = []
        for row in rows:
            state = NetworkState(tuple(row["inventories_before"]), row["hour"])
            info = StepInfo(row["feasible"], row.get("need_served", 0), row["hour"])
            steps.append(
                EpisodeStep(state, Action(row["source"], row["dest"]), float(row["reward"]), info,
                            tuple(row["inventories_after"]))
            )
        final_hour = (rows[-1]["hour"] + 1) % 24
        final = NetworkState(tuple(rows[-1]["inventories_after"]), final_hour)
        if registry is not None:
            for state in [step.state for step in steps] + [final]:
                state.check_against(registry)
        return cls(initial=steps[0].state, steps=steps, final=final)


def is_feasible(state: NetworkState, action: Action, registry: StationRegistry) -> bool:
    """A move needs a bike at the source and a free dock at the destination."""
    return (
        state.inventories[action.source] >= 1
        and state.inventories[action.dest] < int(registry.capacities[action.dest])
    )


def compute_reward(
    state_before: NetworkState,
    action: Action,
    registry: StationRegistry,
    constants: RewardConstants = RewardConstants(),
) -> float:
    if not is_feasible(state_before, action, registry):
        return constants.infeasible
    shortfall = need(state_before, action.dest, registry)
    if shortfall > 0:
        return constants.scale * shortfall / int(registry.capacities[action.dest])
    return constants.wasted


def apply_demand(state: NetworkState, profile: DemandProfile, registry: StationRegistry) -> NetworkState:
    """One hour of public usage, clipped to [0, capacity]; the hour itself is not advanced."""
    if not 0 <= state.hour < 24:
        raise ContractViolation(f"hour {state.hour} has no demand column")
    inventories = np.clip(state.as_array() + profile.deltas[:, state.hour], 0, registry.capacities)
    return NetworkState.from_array(inventories, state.hour)


def encode_observation(state: NetworkState, registry: StationRegistry) -> np.ndarray:
    """Network input: inventories / capacity followed by hour / 23, all in [0, 1]."""
    observation = np.empty(len(registry) + 1, dtype=np.float64)
    observation[:-1] = state.as_array() / registry.capacities
    observation[-1] = state.hour / 23.0
    return observation


class RebalancingEnv:
    """Stateful, single-threaded simulator; build one instance per seed."""

    def __init__(
        self,
        registry: StationRegistry,
        profile: DemandProfile,
        episode_hours: int = 24,
        rewards: RewardConstants = RewardConstants(),
    ):
        if not profile.matches(registry):
            raise ContractViolation("demand profile stations do not match the registry order")
        if len(registry) < 2:
            raise ContractViolation("the simulator needs at least two stations")
        if not 1 <= episode_hours <= 24:
            raise ContractViolation("episode_hours must lie in [1, 24]")
        self.registry = registry
        self.profile = profile
        self.episode_hours = episode_hours
        self.rewards = rewards
        self.n_stations = len(registry)
        self.n_actions = action_space_size(self.n_stations)
        self.observation_size = self.n_stations + 1
        self._state: Optional[NetworkState] = None
        self._elapsed = 0
        self._log: Optional[EpisodeLog] = None

    @property
    def state(self) -> NetworkState:
        if self._state is None:
            raise ContractViolation("call reset() before using the environment")
        return self._state

    @property
    def done(self) -> bool:
        return self._state is not None and self._elapsed >= self.episode_hours

    @property
    def episode_log(self) -> EpisodeLog:
        if self._log is None:
            raise ContractViolation("call reset() before reading the episode log")
        return self._log

    def observe(self) -> np.ndarray:
        return encode_observation(self.state, self.registry)

    def reset(self, seed: int) -> NetworkState:
        """Draws every inventory uniformly from [0, capacity]; same seed, same state."""
        rng = np.random.default_rng(seed)
        inventories = rng.integers(0, self.registry.capacities + 1)
        self._state = NetworkState.from_array(inventories, 0)
        self._elapsed = 0
        self._log = EpisodeLog(initial=self._state)
        return self._state

    def step(self, action_index: int) -> StepOutcome:
        if self._state is None:
            raise ContractViolation("call reset() before step()")
        if self.done:
            raise ContractViolation("episode is done; call reset() before stepping again")
        action = decode_action(action_index, self.n_stations)
        before = self._state

        feasible = is_feasible(before, action, self.registry)
        reward = compute_reward(before, action, self.registry, self.rewards)
        need_served = need(before, action.dest, self.registry) if feasible else 0

        inventories = before.as_array()
        if feasible:
            inventories[action.source] -= 1
            inventories[action.dest] += 1
        moved = NetworkState.from_array(inventories, before.hour)
        after_demand = apply_demand(moved, self.profile, self.registry)

        self._elapsed += 1
        next_state = NetworkState(after_demand.inventories, self._elapsed % 24)
        self._state = next_state
        done = self._elapsed >= self.episode_hours

        info = StepInfo(action_feasible=feasible, need_served=need_served, hour_executed=before.hour)
        self._log.steps.append(EpisodeStep(before, action, reward, info, next_state.inventories))
        if done:
            self._log.final = next_state
        return StepOutcome(next_state, reward, done, info)


def random_policy(rng: np.random.Generator, n_actions: int) -> Policy:
    def _policy(observation: np.ndarray, state: NetworkState) -> int:
        return int(rng.integers(n_actions))

    return _policy


def rollout(env: RebalancingEnv, policy: Policy, seed: int) -> EpisodeLog:
    """Plays one full episode from ``reset(seed)`` and returns its log."""
    env.reset(seed)
    while not env.done:
        env.step(policy(env.observe(), env.state))
    return env.episode_log

"""DQN strategist: replay memory, epsilon-greedy exploration, Bellman targets,
gradient updates, target syncing and the training loop."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from smartflow.core.env import EpisodeLog, Policy, RebalancingEnv, rollout
from smartflow.core.exceptions import ContractViolation, TrainingError
from smartflow.core.qnetwork import Adam, QNetwork
from smartflow.utils.settings import SimConfig

logger = logging.getLogger(__name__)

PROGRESS_EVERY_EPISODES = 100


@dataclass(frozen=True)
class Transition:
    state_vec: np.ndarray
    action: int
    reward: float
    next_state_vec: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            states=np.stack([t.state_vec for t in transitions]),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.stack([t.next_state_vec for t in transitions]),
            dones=np.array([t.done for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring buffer; once full the oldest transition is overwritten."""

    def __init__(self, capacity: int, observation_size: int):
        if capacity < 1:
            raise ContractViolation("replay capacity must be >= 1")
        self.capacity = capacity
        self.observation_size = observation_size
        self._states = np.zeros((capacity, observation_size), dtype=np.float64)
        self._next_states = np.zeros((capacity, observation_size), dtype=np.float64)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=np.float64)
        self._dones = np.zeros(capacity, dtype=bool)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, transition: Transition):
        if len(transition.state_vec) != self.observation_size or len(transition.next_state_vec) != self.observation_size:
            raise ContractViolation(f"transition vectors must have length {self.observation_size}")
        slot = self._cursor
        self._states[slot] = transition.state_vec
        self._next_states[slot] = transition.next_state_vec
        self._actions[slot] = transition.action
        self._rewards[slot] = transition.reward
        self._dones[slot] = transition.done
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _batch(self, slots: np.ndarray) -> Batch:
        return Batch(
            states=self._states[slots],
            actions=self._actions[slots],
            rewards=self._rewards[slots],
            next_states=self._next_states[slots],
            dones=self._dones[slots],
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform mini-batch without replacement."""
        if batch_size > self._size:
            raise ContractViolation(f"cannot sample {batch_size} transitions from {self._size}")
        return self._batch(rng.choice(self._size, size=batch_size, replace=False))

    def transitions(self) -> Batch:
        """Stored transitions, oldest first."""
        start = self._cursor if self._size == self.capacity else 0
        slots = (start + np.arange(self._size)) % self.capacity
        return self._batch(slots)


class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over the first ``decay_steps`` steps, flat afterwards."""

    def __init__(self, start: float, end: float, decay_steps: int):
        if not start >= end >= 0.0:
            raise ContractViolation("epsilon_start >= epsilon_end >= 0 must hold")
        self.start = start
        self.end = end
        self.decay_steps = max(0, int(decay_steps))

    @classmethod
    def from_config(cls, config: SimConfig) -> "EpsilonSchedule":
        return cls(
            config.epsilon_start,
            config.epsilon_end,
            round(config.epsilon_decay_fraction * config.total_timesteps),
        )

    def __call__(self, step: int) -> float:
        if self.decay_steps == 0 or step >= self.decay_steps:
            return self.end
        return self.start + (self.end - self.start) * (step / self.decay_steps)


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy: uniform index with probability epsilon, else argmax (lowest index on ties)."""
    q = np.asarray(q)
    if q.size == 0:
        raise ContractViolation("cannot select an action from an empty q-vector")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractViolation(f"epsilon {epsilon} is outside [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def compute_targets(batch: Batch, target_net: QNetwork, gamma: float) -> np.ndarray:
    """Bellman targets: y = r for terminal transitions, else r + gamma * max_a' Q_target(s', a')."""
    if len(batch) == 0:
        raise ContractViolation("cannot compute targets for an empty batch")
    bootstrap = target_net.forward(batch.next_states).max(axis=1)
    return np.where(batch.dones, batch.rewards, batch.rewards + gamma * bootstrap)


def train_step(
    net: QNetwork,
    target_net: QNetwork,
    batch: Batch,
    learning_rate: float,
    gamma: float = 0.99,
    optimizer=None,
) -> float:
    """One gradient update of ``net`` towards the target-network Bellman targets.

    Args:
      net: online network, updated in place
      target_net: frozen network producing the targets
      batch: sampled transitions
      learning_rate: used only when no ``optimizer`` is passed (a fresh Adam is built)
      gamma: discount
      optimizer: persistent optimizer keeping its moment estimates across calls

    Returns:
      the loss measured before the update
    """
    targets = compute_targets(batch, target_net, gamma)
    loss, grads = net.td_loss_and_grads(batch.states, batch.actions, targets)
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss} (batch rewards in [{batch.rewards.min()}, {batch.rewards.max()}])"
        )
    if optimizer is None:
        optimizer = Adam(learning_rate)
    optimizer.step(net.parameters(), grads)
    if not net.is_finite():
        raise TrainingError(f"update after loss {loss:.6g} left non-finite weights")
    return loss


def sync_target(net: QNetwork, target_net: QNetwork):
    """Hard copy of the online weights into the target network."""
    if net.layer_shapes != target_net.layer_shapes:
        raise ContractViolation(f"cannot sync {net.layer_shapes} into {target_net.layer_shapes}")
    for source, dest in zip(net.parameters(), target_net.parameters()):
        np.copyto(dest, source)


def greedy_policy(net: QNetwork) -> Policy:
    def _policy(observation: np.ndarray, state) -> int:
        return int(np.argmax(net.forward(observation)))

    return _policy


@dataclass
class LearningCurve:
    rewards: List[float] = field(default_factory=list)
    window: int = 100

    def __len__(self) -> int:
        return len(self.rewards)

    def moving_average(self) -> List[float]:
        series = pd.Series(self.rewards, dtype=np.float64)
        return series.rolling(self.window, min_periods=1).mean().tolist()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "episode": np.arange(1, len(self.rewards) + 1),
                "reward": self.rewards,
                "moving_avg": self.moving_average(),
            }
        )

    def to_csv(self, path: Union[Path, str]):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Union[Path, str], window: int = 100) -> "LearningCurve":
        frame = pd.read_csv(path)
        return cls([float(value) for value in frame["reward"]], window)


@dataclass
class TrainingResult:
    net: QNetwork
    curve: LearningCurve
    final_log: EpisodeLog
    losses: List[float]
    window: int = 100

    @property
    def final_loss(self) -> float:
        if not self.losses:
            return float("nan")
        return float(np.mean(self.losses[-self.window:]))


def train(env: RebalancingEnv, config: SimConfig, seed: int) -> TrainingResult:
    """Runs the act / store / update / sync loop for ``config.total_timesteps`` steps.

    Episodes restart from ``reset`` with seeds drawn from the run generator, so
    the whole run is a pure function of (seed, config, env data). The returned
    log is a greedy rollout of the trained network from ``reset(seed)``.
    """
    rng = np.random.default_rng(seed)
    net = QNetwork.initialize(env.observation_size, env.n_actions, config.hidden_sizes, seed)
    target_net = net.copy()
    optimizer = Adam(config.learning_rate)
    buffer = ReplayBuffer(config.buffer_capacity, env.observation_size)
    schedule = EpsilonSchedule.from_config(config)
    curve = LearningCurve(window=config.moving_average_window)
    losses: List[float] = []

    episode_reward = 0.0
    if config.total_timesteps:
        env.reset(int(rng.integers(2 ** 31)))
        observation = env.observe()
    for step in range(config.total_timesteps):
        epsilon = schedule(step)
        action = select_action(net.forward(observation), epsilon, rng)
        outcome = env.step(action)
        next_observation = env.observe()
        buffer.push(Transition(observation, action, outcome.reward, next_observation, outcome.done))
        episode_reward += outcome.reward
        observation = next_observation

        if step >= config.learning_starts and step % config.train_freq == 0 and len(buffer) >= config.batch_size:
            batch = buffer.sample(config.batch_size, rng)
            try:
                losses.append(train_step(net, target_net, batch, config.learning_rate, config.gamma, optimizer))
            except TrainingError as exc:
                raise TrainingError(f"seed {seed}, step {step}: {exc}") from exc
        if step % config.target_sync_interval == 0:
            sync_target(net, target_net)
            logger.debug("Target network synced at step %d", step)

        if outcome.done:
            curve.rewards.append(episode_reward)
            episode_reward = 0.0
            if len(curve) % PROGRESS_EVERY_EPISODES == 0:
                logger.info(
                    "seed=%d episode=%d reward=%.3f moving_avg=%.3f epsilon=%.3f loss=%s",
                    seed, len(curve), curve.rewards[-1], curve.moving_average()[-1], epsilon,
                    f"{losses[-1]:.4f}" if losses else "n/a",
                )
            env.reset(int(rng.integers(2 ** 31)))
            observation = env.observe()

    final_log = rollout(env, greedy_policy(net), seed)
    logger.info("Training with seed %d finished after %d episodes", seed, len(curve))
    return TrainingResult(net, curve, final_log, losses, config.moving_average_window)

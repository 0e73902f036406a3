from smartflow.core.agent import train
from smartflow.core.env import RebalancingEnv, rollout
from smartflow.core.planner import plan_episode
from smartflow.core.report import generate_report

__all__ = ["RebalancingEnv", "generate_report", "plan_episode", "rollout", "train"]

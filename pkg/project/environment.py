"""Search environment: prune, re-lower and act again until the FLOPs constraint holds, then score the result."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np

from project.agent import ExplorationMode, Transition
from project.config import EnvConfig, FrozenBaseModel
from project.flops import count_flops, flops_ratio
from project.hgraph import HierGraph, lower
from project.model_ir import ModelIR
from project.pruning import DEFAULT_A_MAX, agent_slots, apply_policy, effective_ratios, strategy_ratios

logger = logging.getLogger(__name__)


class TerminatedBy(str, Enum):
    constraint_met = "constraint_met"
    max_steps = "max_steps"


class StepRecord(FrozenBaseModel):
    ratios: dict[str, float]
    flops_ratio: float


class EpisodeReport(FrozenBaseModel):
    episode: int
    mode: ExplorationMode
    steps: list[StepRecord]
    flops_ratio: float
    # None when the constraint was never met
    final_accuracy: float | None
    reward: float
    terminated_by: TerminatedBy


class SearchAgent(Protocol):
    learns: bool

    def select_action(self, state: HierGraph, episode: int, slots: int | None = None) -> np.ndarray: ...

    def remember(self, transition: Transition): ...


class AccuracyOracle(Protocol):
    def reward_accuracy(self, m: ModelIR) -> float: ...


@dataclass(frozen=True)
class SearchResult:
    best_model: ModelIR | None
    best_report: EpisodeReport | None
    # per-step policies of the best episode
    best_chain: list[dict[str, float]]
    history: list[EpisodeReport] = field(default_factory=list)

    @property
    def rewards(self) -> list[float]:
        return [report.reward for report in self.history]

    @property
    def best_ratios(self) -> dict[str, float]:
        return effective_ratios(self.best_model) if self.best_model is not None else {}


def _mode(agent: SearchAgent, episode: int, cfg: EnvConfig) -> ExplorationMode:
    if not agent.learns or episode < cfg.warmup_episodes:
        return ExplorationMode.random

    return ExplorationMode.noisy


def run_episode(
    m0: ModelIR,
    agent: SearchAgent,
    oracle: AccuracyOracle,
    cfg: EnvConfig,
    episode: int = 0,
    a_max: float = DEFAULT_A_MAX,
    baseline_flops: int | None = None,
) -> tuple[EpisodeReport, ModelIR]:
    """Run one episode from the original model; every transition of the episode is handed to the agent."""
    baseline = baseline_flops if baseline_flops is not None else count_flops(m0).total
    slots = len(agent_slots(m0))

    m = m0
    ratio = flops_ratio(m, baseline)
    states: list[HierGraph] = []
    actions: list[np.ndarray] = []
    steps: list[StepRecord] = []

    while ratio > cfg.flops_target and len(steps) < cfg.max_steps:
        state = lower(m)
        action = agent.select_action(state, episode, slots=slots)
        policy = strategy_ratios(m, action, a_max)

        m = apply_policy(m, policy)
        ratio = flops_ratio(m, baseline)

        states.append(state)
        actions.append(np.asarray(action, dtype=np.float64))
        steps.append(StepRecord(ratios=policy.ratios, flops_ratio=ratio))
        logger.debug(
            f"Episode {episode} step {len(steps)}: FLOPs ratio {ratio:.4f}.",
            extra={"episode": episode, "step": len(steps), "flops_ratio": ratio},
        )

    if ratio <= cfg.flops_target:
        terminated_by = TerminatedBy.constraint_met
        final_accuracy = oracle.reward_accuracy(m)
        reward = -(1.0 - final_accuracy)
    else:
        terminated_by = TerminatedBy.max_steps
        final_accuracy = None
        reward = cfg.failure_reward

    for i, (state, action) in enumerate(zip(states, actions)):
        last = i == len(states) - 1
        agent.remember(
            Transition(
                state=state,
                action=action,
                reward=reward if last else 0.0,
                next_state=None if last else states[i + 1],
                done=last,
            )
        )

    report = EpisodeReport(
        episode=episode,
        mode=_mode(agent, episode, cfg),
        steps=steps,
        flops_ratio=ratio,
        final_accuracy=final_accuracy,
        reward=reward,
        terminated_by=terminated_by,
    )
    return report, m


def train(
    m0: ModelIR,
    agent: SearchAgent,
    oracle: AccuracyOracle,
    cfg: EnvConfig,
    a_max: float = DEFAULT_A_MAX,
    on_episode: Callable[[EpisodeReport], None] | None = None,
) -> SearchResult:
    """Warmup episodes with random actions, then exploit episodes with noisy actions and an agent update after each.
    The best constraint-satisfying episode wins; ties keep the earliest."""
    baseline = count_flops(m0).total
    history: list[EpisodeReport] = []
    best: tuple[EpisodeReport, ModelIR] | None = None

    for episode in range(cfg.total_episodes):
        report, m = run_episode(m0, agent, oracle, cfg, episode, a_max, baseline)
        history.append(report)

        if agent.learns and episode >= cfg.warmup_episodes:
            _update(agent, episode)

        if report.terminated_by == TerminatedBy.constraint_met and (best is None or report.reward > best[0].reward):
            best = (report, m)

        logger.info(
            f"Episode {episode}: {report.terminated_by.value} after {len(report.steps)} steps, "
            f"FLOPs ratio {report.flops_ratio:.4f}, reward {report.reward:.4f}.",
            extra={"episode": episode, "reward": report.reward, "flops_ratio": report.flops_ratio},
        )

        if on_episode is not None:
            on_episode(report)

    if best is None:
        return SearchResult(best_model=None, best_report=None, best_chain=[], history=history)

    report, m = best
    return SearchResult(
        best_model=m,
        best_report=report,
        best_chain=[step.ratios for step in report.steps],
        history=history,
    )


def _update(agent, episode: int):
    if len(agent.buffer) < agent.config.batch_size:
        logger.debug(f"Skipping the update after episode {episode}: {len(agent.buffer)} transitions stored.")
        return

    for _ in range(agent.config.updates_per_episode):
        critic_loss, actor_loss = agent.update()

    logger.debug(
        f"Update after episode {episode}: critic loss {critic_loss:.5f}, actor loss {actor_loss:.5f}.",
        extra={"episode": episode, "critic_loss": critic_loss, "actor_loss": actor_loss},
    )

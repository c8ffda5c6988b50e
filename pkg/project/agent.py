import json
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from project.config import AgentConfig, EncoderConfig
from project.errors import InsufficientBufferError, SlotMismatchError
from project.hgraph import HierGraph
from project.mgnn import MultiStageEncoder
from project.numerics import functional as F
from project.numerics.module import MLP, Module, make_rng
from project.numerics.optim import Adam
from project.numerics.serialization import load_tensors, save_tensors
from project.numerics.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class ExplorationMode(str, Enum):
    random = "random"
    noisy = "noisy"
    greedy = "greedy"


@dataclass(frozen=True)
class Transition:
    state: HierGraph
    action: np.ndarray
    reward: float
    # None for terminal transitions
    next_state: HierGraph | None
    done: bool


class ActorNet(Module):
    """Graph encoder followed by an MLP head; outputs are a_max * sigmoid(head(layer_norm(g)))."""

    def __init__(self, encoder: MultiStageEncoder, num_slots: int, head_hidden: int, a_max: float, rng):
        self.encoder = encoder
        self.head = MLP([encoder.hidden_dim, head_hidden, num_slots], rng)
        self._a_max = a_max

    def __call__(self, states: Sequence[HierGraph]) -> Tensor:
        return F.sigmoid(self.head(F.layer_norm(self.encoder(states)))) * self._a_max


class CriticNet(Module):
    def __init__(self, encoder: MultiStageEncoder, num_slots: int, head_hidden: int, rng):
        self.encoder = encoder
        self.head = MLP([encoder.hidden_dim + num_slots, head_hidden, head_hidden, 1], rng)

    def __call__(self, states: Sequence[HierGraph], actions: Tensor) -> Tensor:
        return self.head(F.concat([F.layer_norm(self.encoder(states)), actions], axis=1))


class ReplayBuffer:
    """FIFO buffer of transitions with uniform sampling without replacement."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self._entries: deque[Transition] = deque(maxlen=capacity)
        self._rng = rng

    def __len__(self):
        return len(self._entries)

    def __getitem__(self, i: int) -> Transition:
        return self._entries[i]

    def push(self, transition: Transition):
        self._entries.append(transition)

    def sample_indices(self, n: int) -> np.ndarray:
        if len(self._entries) < n:
            raise InsufficientBufferError(f"cannot sample {n} transitions from a buffer of {len(self._entries)}")

        return self._rng.choice(len(self._entries), size=n, replace=False)

    def sample(self, n: int) -> list[Transition]:
        return [self._entries[i] for i in self.sample_indices(n)]


class NoiseSchedule:
    """Gaussian exploration noise decayed exponentially per episode after the warmup."""

    def __init__(self, sigma0: float, decay: float, warmup_episodes: int):
        self.sigma0 = sigma0
        self.decay = decay
        self.warmup_episodes = warmup_episodes

    def sigma(self, episode: int) -> float:
        return self.sigma0 * self.decay ** max(0, episode - self.warmup_episodes)


def soft_update(target: Module, online: Module, tau: float):
    """theta' <- (1 - tau) * theta' + tau * theta for every parameter present in both modules with equal shape."""
    target_params = dict(target.named_parameters())

    for name, p in online.named_parameters():
        t = target_params.get(name)

        if t is None or t.shape != p.shape:
            continue

        t.data = (1 - tau) * t.data + tau * p.data


class DDPGAgent:
    learns = True

    def __init__(
        self,
        state: HierGraph,
        num_slots: int,
        config: AgentConfig,
        encoder_config: EncoderConfig,
        warmup_episodes: int,
        seed: int = 0,
    ):
        init_seed, noise_seed, replay_seed = np.random.SeedSequence(seed).spawn(3)
        init_rng = make_rng(init_seed)

        self.num_slots = num_slots
        self.config = config
        self.warmup_episodes = warmup_episodes
        self.actor = ActorNet(
            MultiStageEncoder.for_hierarchy(state, encoder_config, init_rng),
            num_slots,
            config.head_hidden,
            config.a_max,
            init_rng,
        )
        self.critic = CriticNet(
            MultiStageEncoder.for_hierarchy(state, encoder_config, init_rng),
            num_slots,
            config.head_hidden,
            init_rng,
        )
        self.actor_target = self.actor.clone()
        self.critic_target = self.critic.clone()
        self.actor_optimizer = Adam(self.actor.parameters(), lr=config.actor_lr)
        self.critic_optimizer = Adam(self.critic.parameters(), lr=config.critic_lr)

        self.buffer = ReplayBuffer(config.buffer_capacity, make_rng(replay_seed))
        self.noise = NoiseSchedule(config.initial_sigma, config.sigma_decay, warmup_episodes)
        self.sigma = self.noise.sigma0
        self.updates = 0
        self._rng = make_rng(noise_seed)

    def _check_slots(self, slots: int | None):
        if slots is not None and slots != self.num_slots:
            raise SlotMismatchError(f"agent controls {self.num_slots} slots, the model has {slots}")

    def warmup_policy(self, episode: int) -> ExplorationMode:
        return ExplorationMode.random if episode < self.warmup_episodes else ExplorationMode.noisy

    def random_action(self) -> np.ndarray:
        return self._rng.uniform(0.0, self.config.a_max, size=self.num_slots)

    def act(self, state: HierGraph, explore: bool = False, slots: int | None = None) -> np.ndarray:
        self._check_slots(slots)

        with no_grad():
            action = self.actor([state]).data[0].copy()

        if explore:
            action = action + self._rng.normal(0.0, self.sigma, size=self.num_slots)

        return np.clip(action, 0.0, self.config.a_max)

    def select_action(self, state: HierGraph, episode: int, slots: int | None = None) -> np.ndarray:
        self._check_slots(slots)

        if self.warmup_policy(episode) == ExplorationMode.random:
            return self.random_action()

        self.sigma = self.noise.sigma(episode)
        return self.act(state, explore=True)

    def remember(self, transition: Transition):
        self.buffer.push(transition)

    def critic_targets(self, batch: Sequence[Transition]) -> np.ndarray:
        """y = r + gamma * (1 - done) * Q'(s', mu'(s')), shape (batch, 1)."""
        rewards = np.array([[t.reward] for t in batch])
        alive = np.array([[0.0 if t.done else 1.0] for t in batch])
        next_states = [t.next_state if t.next_state is not None else t.state for t in batch]

        with no_grad():
            q_next = self.critic_target(next_states, self.actor_target(next_states)).data

        return rewards + self.config.gamma * alive * q_next

    def update(self) -> tuple[float, float]:
        """One actor-critic step on a sampled minibatch followed by soft target updates."""
        batch = self.buffer.sample(self.config.batch_size)
        states = [t.state for t in batch]
        actions = Tensor(np.stack([t.action for t in batch]))
        targets = self.critic_targets(batch)

        critic_loss = F.mse(self.critic(states, actions), targets)
        backward(critic_loss)
        self.critic_optimizer.step()

        actor_loss = -self.critic(states, self.actor(states)).mean()
        backward(actor_loss)
        self.actor_optimizer.step()
        # the actor loss also populated critic gradients
        self.critic.zero_grad()

        soft_update(self.actor_target, self.actor, self.config.tau)
        soft_update(self.critic_target, self.critic, self.config.tau)
        self.updates += 1

        return critic_loss.item(), actor_loss.item()

    def networks(self) -> dict[str, Module]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }

    def save_checkpoint(self, path: Path):
        """Network parameters in the sidecar weight format plus a JSON summary of buffer and schedule."""
        save_tensors(path, {name: net.state_dict() for name, net in self.networks().items()})

        summary = {
            "num_slots": self.num_slots,
            "updates": self.updates,
            "sigma": self.sigma,
            "buffer": {"size": len(self.buffer), "capacity": self.buffer.capacity},
            "config": self.config.model_dump(mode="json"),
        }
        with checkpoint_summary_path(path).open("w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)

    def load_checkpoint(self, path: Path):
        groups = load_tensors(path)

        for name, net in self.networks().items():
            net.load_state_dict(groups[name])

        with checkpoint_summary_path(path).open() as f:
            summary = json.load(f)

        self._check_slots(summary["num_slots"])
        self.updates = summary["updates"]
        self.sigma = summary["sigma"]


def checkpoint_summary_path(path: Path) -> Path:
    return path.with_suffix(".agent.json")


class RandomSearchAgent:
    """Baseline that samples every action uniformly in [0, a_max] and never learns."""

    learns = False

    def __init__(self, num_slots: int, a_max: float, seed: int = 0):
        self.num_slots = num_slots
        self.a_max = a_max
        self._rng = make_rng(seed)

    def select_action(self, state: HierGraph, episode: int, slots: int | None = None) -> np.ndarray:
        if slots is not None and slots != self.num_slots:
            raise SlotMismatchError(f"agent controls {self.num_slots} slots, the model has {slots}")

        return self._rng.uniform(0.0, self.a_max, size=self.num_slots)

    def remember(self, transition: Transition):
        pass

"""Influence-augmented DQN over factored beliefs.

The Q-network sees the agent's own belief and the influence estimate (the
estimated belief of the POI), both flattened and concatenated, and outputs
one value per action. The world model stays frozen while the policy trains,
so its encodings are cached per distinct window.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .config import EnvConfig, PolicyConfig
from .data import episode_seed
from .env import N_ACTIONS, Action, EgoObservation, GridEnv, WorldState, render_observation
from .perspective import (
    Condition,
    InfluenceEstimate,
    ObservedPose,
    apply_perspective_shift,
    dirichlet_belief,
    uniform_estimate,
)
from .world_model import FactoredBelief, WorldModel

POLICY_CHECKPOINT_VERSION = 1


@dataclass
class PolicyInput:
    own_belief: FactoredBelief
    other_belief: InfluenceEstimate

    def vector(self) -> np.ndarray:
        return np.concatenate([self.own_belief.flat(), self.other_belief.belief.flat()]).astype(np.float32)


@dataclass
class ReplayItem:
    input: np.ndarray
    action: int
    reward: float
    next_input: np.ndarray
    terminal: bool


class QNetwork(nn.Module):
    def __init__(self, input_dim: int = 128, hidden: tuple[int, ...] = (256, 128), init_scale: float = 0.1):
        super().__init__()
        sizes = [input_dim, *hidden, N_ACTIONS]
        layers: list[nn.Module] = []
        for i in range(len(sizes) - 1):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.layers = nn.Sequential(*layers)
        last = self.layers[-1]
        with torch.no_grad():
            last.weight.mul_(init_scale)
            last.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def _as_matrix(inputs, dtype=torch.float32) -> torch.Tensor:
    if isinstance(inputs, PolicyInput):
        inputs = inputs.vector()[None]
    arr = np.asarray(inputs)
    if arr.ndim == 1:
        arr = arr[None]
    return torch.as_tensor(arr, dtype=dtype)


@torch.no_grad()
def q_values(inputs, net: QNetwork) -> np.ndarray:
    """Q-vector(s) for one :class:`PolicyInput` or a ``(n, 2*N*K)`` matrix."""
    dtype = next(net.parameters()).dtype
    x = _as_matrix(inputs, dtype)
    if x.shape[1] != net.layers[0].in_features:
        raise ValueError(f"expected inputs of width {net.layers[0].in_features}, got {x.shape[1]}")
    q = net(x).double().numpy()
    return q[0] if isinstance(inputs, PolicyInput) or np.asarray(inputs).ndim == 1 else q


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> Action:
    """Epsilon-greedy; greedy ties resolve to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return Action(int(rng.integers(len(q))))
    return Action(int(np.argmax(q)))


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored as flat arrays."""

    def __init__(self, capacity: int, input_dim: int):
        self.capacity = capacity
        self.inputs = np.zeros((capacity, input_dim), dtype=np.float32)
        self.next_inputs = np.zeros((capacity, input_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.terminals = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, item: ReplayItem) -> None:
        k = self._next
        self.inputs[k] = item.input
        self.next_inputs[k] = item.next_input
        self.actions[k] = item.action
        self.rewards[k] = item.reward
        self.terminals[k] = item.terminal
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.integers(0, self._size, size=batch_size)
        return {
            "inputs": self.inputs[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_inputs": self.next_inputs[idx],
            "terminals": self.terminals[idx],
        }

    def items(self) -> list[ReplayItem]:
        order = [(self._next - self._size + i) % self.capacity for i in range(self._size)]
        return [
            ReplayItem(self.inputs[k], int(self.actions[k]), float(self.rewards[k]), self.next_inputs[k],
                       bool(self.terminals[k]))
            for k in order
        ]


def _batch_tensors(batch, dtype) -> dict[str, torch.Tensor]:
    if isinstance(batch, dict):
        b = batch
    else:
        b = {
            "inputs": np.stack([it.input for it in batch]),
            "actions": np.array([int(it.action) for it in batch]),
            "rewards": np.array([it.reward for it in batch]),
            "next_inputs": np.stack([it.next_input for it in batch]),
            "terminals": np.array([it.terminal for it in batch]),
        }
    return {
        "inputs": torch.as_tensor(np.asarray(b["inputs"]), dtype=dtype),
        "actions": torch.as_tensor(np.asarray(b["actions"]), dtype=torch.long),
        "rewards": torch.as_tensor(np.asarray(b["rewards"]), dtype=dtype),
        "next_inputs": torch.as_tensor(np.asarray(b["next_inputs"]), dtype=dtype),
        "terminals": torch.as_tensor(np.asarray(b["terminals"]), dtype=torch.bool),
    }


def dqn_targets(rewards: torch.Tensor, next_q: torch.Tensor, terminals: torch.Tensor, gamma: float) -> torch.Tensor:
    """``r + gamma * max_a Q_target(s', a)``, or ``r`` for terminal items."""
    bootstrap = next_q.max(dim=1).values
    return rewards + gamma * torch.where(terminals, torch.zeros_like(bootstrap), bootstrap)


def dqn_loss(batch, net: QNetwork, target_net: QNetwork, gamma: float) -> torch.Tensor:
    """Mean squared TD error on the taken actions (targets carry no gradient)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    dtype = next(net.parameters()).dtype
    t = _batch_tensors(batch, dtype)
    if len(t["actions"]) == 0:
        raise ValueError("empty batch")
    with torch.no_grad():
        y = dqn_targets(t["rewards"], target_net(t["next_inputs"]), t["terminals"], gamma)
    q = net(t["inputs"]).gather(1, t["actions"][:, None]).squeeze(1)
    return F.mse_loss(q, y)


def dqn_update(batch, net: QNetwork, target_net: QNetwork, gamma: float,
               optimizer: torch.optim.Optimizer) -> float:
    """One gradient step on the DQN loss; returns the loss value."""
    loss = dqn_loss(batch, net, target_net, gamma)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite DQN loss: {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


class DQNLearner:
    """Online network, frozen target copy, optimizer and refresh counter."""

    def __init__(self, input_dim: int, cfg: PolicyConfig, seed: int):
        torch.manual_seed(seed)
        self.cfg = cfg
        self.net = QNetwork(input_dim, tuple(cfg.hidden), cfg.init_scale)
        self.target_net = copy.deepcopy(self.net)
        for p in self.target_net.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate)
        self.updates = 0

    def update(self, batch) -> float:
        loss = dqn_update(batch, self.net, self.target_net, self.cfg.gamma, self.optimizer)
        self.updates += 1
        if self.updates % self.cfg.target_refresh == 0:
            self.target_net.load_state_dict(self.net.state_dict())
        return loss


class InfluenceSource:
    """Own-belief and influence estimates against a frozen world model.

    Deterministic quantities (encodings, perspective shifts) are memoised on
    the window bytes.
    """

    def __init__(self, model: WorldModel, condition: Condition | str, rng: np.random.Generator,
                 plan_max_len: int = 12):
        self.model = model
        self.condition = Condition(condition)
        self.rng = rng
        self.plan_max_len = plan_max_len
        self._beliefs: dict[bytes, FactoredBelief] = {}
        self._shifts: dict[tuple[bytes, int | None], InfluenceEstimate] = {}

    def encode(self, obs: EgoObservation) -> FactoredBelief:
        key = obs.key()
        b = self._beliefs.get(key)
        if b is None:
            b = self._beliefs[key] = FactoredBelief(self.model.encode(obs.window[None])[0])
        return b

    def influence(self, obs: EgoObservation, state: WorldState | None) -> InfluenceEstimate:
        if self.condition == Condition.UNIFORM_RANDOM:
            return InfluenceEstimate(
                dirichlet_belief(self.rng, self.model.n_factors, self.model.n_values), self.condition
            )
        if self.condition == Condition.PERFECT_INFORMATION:
            if state is None:
                raise ValueError("the perfect-information condition needs the global state")
            view = render_observation(state, state.poi, self.model.view_size)
            return InfluenceEstimate(self.encode(view), self.condition)
        key = (obs.key(), obs.poi_heading)
        est = self._shifts.get(key)
        if est is None:
            target = ObservedPose.from_observation(obs)
            if target is None:
                est = uniform_estimate(self.model, "not_visible")
            else:
                est = apply_perspective_shift(self.encode(obs), obs, target, self.model, self.plan_max_len)
            self._shifts[key] = est
        return est

    def policy_input(self, obs: EgoObservation, state: WorldState | None) -> PolicyInput:
        return PolicyInput(self.encode(obs), self.influence(obs, state))


def epsilon_at(episode: int, total: int, cfg: PolicyConfig) -> float:
    horizon = max(1, int(total * cfg.eps_fraction))
    frac = min(episode / horizon, 1.0)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def train_policy(
    env_config: EnvConfig,
    model: WorldModel,
    condition: Condition | str,
    seed: int,
    cfg: PolicyConfig | None = None,
    episodes: int | None = None,
    progress: bool = False,
) -> tuple[QNetwork, np.ndarray]:
    """Train one DQN for ``episodes`` episodes on fresh maps.

    Returns the trained network and an ``(episodes, 3)`` curve of
    (episode, cumulative reward, episode length).
    """
    if model is None or not hasattr(model, "net_"):
        raise ValueError("train_policy needs a trained world model")
    cfg = cfg or PolicyConfig()
    episodes = cfg.episodes if episodes is None else episodes
    condition = Condition(condition)
    rng = np.random.default_rng([seed, 11])
    source = InfluenceSource(model, condition, rng, cfg.plan_max_len)
    input_dim = 2 * model.n_factors * model.n_values
    learner = DQNLearner(input_dim, cfg, seed)
    replay = ReplayBuffer(cfg.replay_capacity, input_dim)
    env = GridEnv(env_config)
    curve = np.zeros((episodes, 3))
    steps = 0
    for ep in range(episodes):
        eps = epsilon_at(ep, episodes, cfg)
        obs = env.reset(episode_seed(10_000 + seed, ep))
        x = source.policy_input(obs, env.state).vector()
        total, length = 0.0, 0
        while True:
            action = select_action(q_values(x, learner.net), eps, rng)
            out = env.step(action)
            x_next = source.policy_input(out.observation, env.state).vector()
            done = out.terminated or out.truncated
            replay.add(ReplayItem(x, int(action), out.reward, x_next, done))
            steps += 1
            total += out.reward
            length += 1
            if len(replay) >= max(cfg.warmup, cfg.batch_size) and steps % cfg.train_every == 0:
                learner.update(replay.sample(cfg.batch_size, rng))
            x = x_next
            if done:
                break
        curve[ep] = (ep, total, length)
        if progress and (ep + 1) % 100 == 0:
            recent = curve[max(0, ep - 99) : ep + 1, 1].mean()
            print(f"[{condition.value} seed {seed}] episode {ep + 1}/{episodes} eps {eps:.2f} "
                  f"mean reward (last 100) {recent:.3f}", flush=True)
    return learner.net, curve


class InfluenceDQN(BaseEstimator):
    """Estimator wrapper: ``fit`` trains online against a frozen world model,
    ``predict`` returns greedy actions for ``(n, 2*N*K)`` inputs."""

    def __init__(self, condition: str = "shift", episodes: int = 2000, seed: int = 0,
                 policy_config: PolicyConfig | None = None, env_config: EnvConfig | None = None):
        self.condition = condition
        self.episodes = episodes
        self.seed = seed
        self.policy_config = policy_config
        self.env_config = env_config

    def fit(self, model: WorldModel, y=None):
        self.net_, self.curve_ = train_policy(
            self.env_config or EnvConfig(), model, self.condition, self.seed,
            self.policy_config, episodes=self.episodes,
        )
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return q_values(np.atleast_2d(np.asarray(X, dtype=np.float32)), self.net_)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "net_")
        torch.save(
            {
                "format_version": POLICY_CHECKPOINT_VERSION,
                "condition": self.condition,
                "seed": self.seed,
                "hidden": [m.out_features for m in self.net_.layers if isinstance(m, nn.Linear)][:-1],
                "input_dim": self.net_.layers[0].in_features,
                "state_dict": self.net_.state_dict(),
                "curve": self.curve_,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> InfluenceDQN:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != POLICY_CHECKPOINT_VERSION:
            raise ValueError("unsupported policy checkpoint version")
        est = cls(condition=blob["condition"], seed=blob["seed"])
        est.net_ = QNetwork(blob["input_dim"], tuple(blob["hidden"]))
        est.net_.load_state_dict(blob["state_dict"])
        est.curve_ = blob["curve"]
        return est

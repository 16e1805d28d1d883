"""Factored categorical world model.

An encoder maps an egocentric window to ``N`` categorical factors with ``K``
values each (a row-stochastic ``N x K`` matrix). A transposed-convolution
decoder reconstructs the window, a dense forward model predicts the next
factors from the current ones and a learned action embedding, and an inverse
model recovers the action embedding from two consecutive beliefs.

Training minimises ``loss_vae + loss_forward + loss_inverse`` where

* ``loss_vae``: per-cell cross-entropy of the reconstruction plus
  ``kl_weight * KL(q || uniform)`` summed over factors,
* ``loss_forward``: ``KL(stopgrad(q_next) || forward(q, a))``,
* ``loss_inverse``: MSE to ``stopgrad(embed(a))``.

Two gradient stops keep the objectives from fighting: the forward KL target
does not move the encoder, and the inverse model cannot drag the action
embedding the forward model relies on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .env import N_ACTIONS, N_CHANNELS, Action, EgoObservation
from .validation import check_actions, check_beliefs, check_windows

CHECKPOINT_VERSION = 1


@dataclass
class FactoredBelief:
    """``N x K`` row-stochastic matrix plus the relaxation temperature used
    to produce it (``None`` for a deterministic softmax)."""

    factors: np.ndarray
    temperature: float | None = None

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.shape

    def flat(self) -> np.ndarray:
        return self.factors.reshape(-1)

    @classmethod
    def uniform(cls, n_factors: int = 8, n_values: int = 8) -> FactoredBelief:
        return cls(np.full((n_factors, n_values), 1.0 / n_values))


@dataclass
class TrainReport:
    loss_vae: float
    loss_forward: float
    loss_inverse: float
    loss_total: float
    grad_norm: float
    step: int
    temperature: float
    recon: float = float("nan")
    prior_kl: float = float("nan")


# ---------------------------------------------------------------- networks


class SelfAttention2d(nn.Module):
    """Pre-norm multi-head self-attention over the cells of a feature map."""

    def __init__(self, channels: int, n_cells: int, heads: int):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(1, n_cells, channels))
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2) + self.pos
        q = self.norm(tokens)
        out, _ = self.attn(q, q, q, need_weights=False)
        tokens = tokens + out
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class Encoder(nn.Module):
    def __init__(self, view_size: int, channels: int, heads: int, n_factors: int, n_values: int):
        super().__init__()
        c = channels
        self.conv1 = nn.Conv2d(N_CHANNELS, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, padding=1)
        self.attn = SelfAttention2d(2 * c, view_size * view_size, heads)
        self.conv3 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.head = nn.Linear(2 * c * view_size * view_size, n_factors * n_values)
        self.n_factors, self.n_values = n_factors, n_values

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = self.attn(h)
        h = F.relu(self.conv3(h))
        return self.head(h.flatten(1)).view(-1, self.n_factors, self.n_values)


class Decoder(nn.Module):
    def __init__(self, view_size: int, channels: int, heads: int, n_factors: int, n_values: int):
        super().__init__()
        c = channels
        self.base = view_size - 2
        self.fc = nn.Linear(n_factors * n_values, 2 * c * self.base * self.base)
        self.up1 = nn.ConvTranspose2d(2 * c, 2 * c, 3)
        self.attn = SelfAttention2d(2 * c, view_size * view_size, heads)
        self.up2 = nn.ConvTranspose2d(2 * c, c, 3, padding=1)
        self.out = nn.ConvTranspose2d(c, N_CHANNELS, 3, padding=1)
        self.c2 = 2 * c

    def forward(self, b: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(b.flatten(1))).view(-1, self.c2, self.base, self.base)
        h = F.relu(self.up1(h))
        h = self.attn(h)
        h = F.relu(self.up2(h))
        return self.out(h)


def _mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class WorldModelNet(nn.Module):
    def __init__(
        self,
        view_size: int = 5,
        n_factors: int = 8,
        n_values: int = 8,
        action_dim: int = 8,
        channels: int = 32,
        heads: int = 4,
        hidden: int = 256,
    ):
        super().__init__()
        nk = n_factors * n_values
        self.n_factors, self.n_values = n_factors, n_values
        self.encoder = Encoder(view_size, channels, heads, n_factors, n_values)
        self.decoder = Decoder(view_size, channels, heads, n_factors, n_values)
        self.action_embedding = nn.Embedding(N_ACTIONS, action_dim)
        nn.init.normal_(self.action_embedding.weight, std=0.1)
        self.forward_model = _mlp([nk + action_dim, hidden, hidden, nk])
        self.inverse_model = _mlp([2 * nk, hidden // 2, hidden // 2, action_dim])

    def encode_logits(self, windows: torch.Tensor) -> torch.Tensor:
        x = F.one_hot(windows.long(), N_CHANNELS).permute(0, 3, 1, 2).to(self.action_embedding.weight.dtype)
        return self.encoder(x)

    def predict_next_logits(self, beliefs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        emb = self.action_embedding(actions)
        out = self.forward_model(torch.cat([beliefs.flatten(1), emb], dim=1))
        return out.view(-1, self.n_factors, self.n_values)

    def infer_action(self, beliefs: torch.Tensor, next_beliefs: torch.Tensor) -> torch.Tensor:
        return self.inverse_model(torch.cat([beliefs.flatten(1), next_beliefs.flatten(1)], dim=1))


# ---------------------------------------------------------------- losses


def gumbel_softmax(logits: torch.Tensor, temperature: float, noise: torch.Tensor | None = None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Relaxed categorical sample along the last axis.

    ``noise`` (standard Gumbel, same shape as ``logits``) may be passed in to
    make the sample a deterministic function of the logits.
    """
    if noise is None:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        noise = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
    return F.softmax((logits + noise) / temperature, dim=-1)


def categorical_kl(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    """KL(p || q) summed over the last axis, from log-probabilities."""
    return (p_log.exp() * (p_log - q_log)).sum(-1)


def forward_kl(target_logits: torch.Tensor, predicted_logits: torch.Tensor) -> torch.Tensor:
    """Per-sample ``KL(target || predicted)`` summed over factors.

    The target branch is detached, so this term never updates whatever
    produced ``target_logits``.
    """
    target = F.log_softmax(target_logits.detach(), dim=-1)
    return categorical_kl(target, F.log_softmax(predicted_logits, dim=-1)).sum(-1)


def world_model_losses(
    net: WorldModelNet,
    obs: torch.Tensor,
    actions: torch.Tensor,
    next_obs: torch.Tensor,
    temperature: float,
    kl_weight: float = 1.0,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    frozen: WorldModelNet | None = None,
) -> dict[str, torch.Tensor]:
    """All loss terms for a batch of ``(obs, action, next_obs)`` windows.

    ``frozen`` supplies the two stop-gradient targets (next-step encoding
    for the forward term, action embedding for the inverse term). It
    defaults to ``net`` itself; passing a fixed copy turns the loss into an
    ordinary function of ``net``'s parameters, which is how the gradient is
    checked against finite differences.
    """
    frozen = net if frozen is None else frozen
    logits = net.encode_logits(obs)
    next_logits = net.encode_logits(next_obs)
    with torch.no_grad():
        target_logits = next_logits if frozen is net else frozen.encode_logits(next_obs)
        target_emb = frozen.action_embedding(actions)
    log_q = F.log_softmax(logits, dim=-1)
    q = log_q.exp()

    sample = gumbel_softmax(logits, temperature, noise=noise, generator=generator)
    recon_logits = net.decoder(sample)
    recon = F.cross_entropy(recon_logits, obs.long(), reduction="none").sum((1, 2)).mean()
    prior = (q * (log_q + math.log(net.n_values))).sum((1, 2)).mean()
    loss_vae = recon + kl_weight * prior

    loss_forward = forward_kl(target_logits, net.predict_next_logits(q, actions)).mean()

    q_next = F.softmax(next_logits, dim=-1)
    loss_inverse = F.mse_loss(net.infer_action(q, q_next), target_emb)

    return {
        "vae": loss_vae,
        "recon": recon,
        "prior_kl": prior,
        "forward": loss_forward,
        "inverse": loss_inverse,
        "total": loss_vae + loss_forward + loss_inverse,
    }


def temperature_at(step: int, total: int, start: float, end: float) -> float:
    """Linear anneal from ``start`` to ``end`` over ``total`` steps."""
    if total <= 1:
        return end
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return start + (end - start) * frac


# ---------------------------------------------------------------- estimator


class WorldModel(BaseEstimator, TransformerMixin):
    """Learned factored belief model with a scikit-learn style interface.

    ``fit`` takes a :class:`~socialnav.data.Dataset` or a mapping with
    ``obs``, ``actions`` and ``next_obs`` arrays; ``transform`` maps windows
    to flattened ``N*K`` beliefs.

    Parameters
    ----------
    n_factors, n_values : int
        Belief shape ``N x K``.
    action_dim : int
        Size of the learned action embedding.
    steps, batch_size, learning_rate : training schedule (Adam).
    tau_start, tau_end : float
        Relaxation temperature, annealed linearly over ``steps``.
    kl_weight : float
        Weight of the prior KL inside the VAE term.
    """

    def __init__(
        self,
        n_factors: int = 8,
        n_values: int = 8,
        action_dim: int = 8,
        view_size: int = 5,
        hidden_channels: int = 32,
        attention_heads: int = 4,
        steps: int = 12000,
        batch_size: int = 128,
        learning_rate: float = 3e-4,
        tau_start: float = 1.0,
        tau_end: float = 0.3,
        kl_weight: float = 1.0,
        log_every: int = 100,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.n_factors = n_factors
        self.n_values = n_values
        self.action_dim = action_dim
        self.view_size = view_size
        self.hidden_channels = hidden_channels
        self.attention_heads = attention_heads
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.kl_weight = kl_weight
        self.log_every = log_every
        self.random_state = random_state
        self.verbose = verbose

    # -- setup

    def _init_net(self) -> None:
        torch.manual_seed(self.random_state)
        self.net_ = WorldModelNet(
            self.view_size, self.n_factors, self.n_values, self.action_dim,
            self.hidden_channels, self.attention_heads,
        )
        self.optimizer_ = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.generator_ = torch.Generator().manual_seed(self.random_state)
        self.step_ = 0
        self.history_: list[TrainReport] = []

    @staticmethod
    def _triples(X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if hasattr(X, "arrays"):
            X = X.arrays()
        return X["obs"], X["actions"], X["next_obs"]

    # -- training

    def train_step(self, obs, actions, next_obs, temperature: float | None = None) -> TrainReport:
        """One Adam update on a batch; returns the loss breakdown."""
        if not hasattr(self, "net_"):
            self._init_net()
        obs_t = torch.as_tensor(check_windows(obs, self.view_size))
        next_t = torch.as_tensor(check_windows(next_obs, self.view_size))
        act_t = torch.as_tensor(check_actions(actions))
        if len(obs_t) == 0:
            raise ValueError("empty batch")
        if temperature is None:
            temperature = temperature_at(self.step_, self.steps, self.tau_start, self.tau_end)
        self.net_.train()
        losses = world_model_losses(
            self.net_, obs_t, act_t, next_t, temperature, self.kl_weight, generator=self.generator_
        )
        total = losses["total"]
        if not torch.isfinite(total):
            parts = {k: float(v.detach()) for k, v in losses.items()}
            raise FloatingPointError(f"non-finite world-model loss at step {self.step_}: {parts}")
        self.optimizer_.zero_grad()
        total.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.net_.parameters(), float("inf")))
        self.optimizer_.step()
        self.step_ += 1
        report = TrainReport(
            loss_vae=losses["vae"].item(),
            loss_forward=losses["forward"].item(),
            loss_inverse=losses["inverse"].item(),
            loss_total=total.item(),
            grad_norm=grad_norm,
            step=self.step_,
            temperature=temperature,
            recon=losses["recon"].item(),
            prior_kl=losses["prior_kl"].item(),
        )
        return report

    def fit(self, X, y=None):
        obs, actions, next_obs = self._triples(X)
        obs = check_windows(obs, self.view_size)
        next_obs = check_windows(next_obs, self.view_size)
        actions = check_actions(actions)
        self._init_net()
        rng = np.random.default_rng(self.random_state)
        n = len(obs)
        for _ in range(self.steps):
            idx = rng.integers(0, n, size=min(self.batch_size, n))
            report = self.train_step(obs[idx], actions[idx], next_obs[idx])
            if self.step_ % self.log_every == 0 or self.step_ == 1:
                self.history_.append(report)
                if self.verbose:
                    print(
                        f"step {report.step:6d} tau {report.temperature:.3f} "
                        f"total {report.loss_total:.3f} vae {report.loss_vae:.3f} "
                        f"fwd {report.loss_forward:.3f} inv {report.loss_inverse:.4f}",
                        flush=True,
                    )
        self.net_.eval()
        return self

    # -- inference

    def _logits(self, windows) -> torch.Tensor:
        check_is_fitted(self, "net_")
        w = torch.as_tensor(check_windows(windows, self.view_size))
        return self.net_.encode_logits(w)

    @torch.no_grad()
    def encode(self, windows, temperature: float = 1.0, sample: bool = False,
               generator: torch.Generator | None = None) -> np.ndarray:
        """Beliefs ``(n, N, K)`` for a batch of windows.

        With ``sample=True`` the rows are relaxed categorical samples at the
        given temperature; otherwise a plain softmax of the logits.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        logits = self._logits(windows)
        if sample:
            out = gumbel_softmax(logits.double(), temperature, generator=generator)
        else:
            out = F.softmax(logits.double(), dim=-1)
        return out.numpy()

    def transform(self, X) -> np.ndarray:
        b = self.encode(X)
        return b.reshape(len(b), -1)

    @torch.no_grad()
    def decode(self, beliefs) -> np.ndarray:
        """Channel logits ``(n, V, V, C)`` for a batch of beliefs."""
        check_is_fitted(self, "net_")
        b = torch.as_tensor(check_beliefs(beliefs, self.n_factors, self.n_values), dtype=torch.float32)
        return self.net_.decoder(b).permute(0, 2, 3, 1).double().numpy()

    @torch.no_grad()
    def forward_predict(self, beliefs, actions) -> np.ndarray:
        check_is_fitted(self, "net_")
        b = torch.as_tensor(check_beliefs(beliefs, self.n_factors, self.n_values), dtype=torch.float32)
        a = torch.as_tensor(check_actions(actions))
        if len(a) != len(b):
            raise ValueError("beliefs and actions differ in length")
        logits = self.net_.predict_next_logits(b, a)
        return F.softmax(logits.double(), dim=-1).numpy()

    @torch.no_grad()
    def inverse_predict(self, beliefs, next_beliefs) -> np.ndarray:
        check_is_fitted(self, "net_")
        b = torch.as_tensor(check_beliefs(beliefs, self.n_factors, self.n_values), dtype=torch.float32)
        b2 = torch.as_tensor(check_beliefs(next_beliefs, self.n_factors, self.n_values), dtype=torch.float32)
        return self.net_.infer_action(b, b2).double().numpy()

    @property
    def action_table(self) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.net_.action_embedding.weight.detach().double().numpy()

    def classify_actions(self, embeddings: np.ndarray) -> np.ndarray:
        """Nearest action-embedding index for each row."""
        table = self.action_table
        d = ((np.asarray(embeddings)[:, None, :] - table[None]) ** 2).sum(-1)
        return d.argmin(1)

    # -- evaluation

    def reconstruction_accuracy(self, windows) -> float:
        windows = check_windows(windows, self.view_size)
        recon = self.decode(self.encode(windows)).argmax(-1)
        return float((recon == windows).mean())

    def inverse_accuracy(self, X) -> float:
        obs, actions, next_obs = self._triples(X)
        pred = self.classify_actions(self.inverse_predict(self.encode(obs), self.encode(next_obs)))
        return float((pred == check_actions(actions)).mean())

    def score(self, X, y=None) -> float:
        """Held-out cell-wise reconstruction accuracy."""
        obs, _, _ = self._triples(X)
        return self.reconstruction_accuracy(obs)

    # -- persistence

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "net_")
        state = self.net_.state_dict()
        torch.save(
            {
                "format_version": CHECKPOINT_VERSION,
                "params": self.get_params(),
                "shapes": {k: list(v.shape) for k, v in state.items()},
                "state_dict": state,
                "step": self.step_,
                "history": [vars(r) for r in self.history_],
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> WorldModel:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {blob.get('format_version')} != supported {CHECKPOINT_VERSION}"
            )
        model = cls(**blob["params"])
        model._init_net()
        shapes = {k: list(v.shape) for k, v in model.net_.state_dict().items()}
        if shapes != blob["shapes"]:
            raise ValueError("checkpoint shapes do not match the configured architecture")
        model.net_.load_state_dict(blob["state_dict"])
        model.net_.eval()
        model.step_ = blob["step"]
        model.history_ = [TrainReport(**r) for r in blob["history"]]
        return model


# ---------------------------------------------------------------- functional API


def _as_windows(obs) -> np.ndarray:
    if isinstance(obs, EgoObservation):
        return obs.window[None]
    return np.asarray(obs)


def encode(obs, model: WorldModel, temperature: float = 1.0, sample: bool = False) -> FactoredBelief:
    """Encode one observation into a :class:`FactoredBelief`."""
    factors = model.encode(_as_windows(obs), temperature=temperature, sample=sample)[0]
    return FactoredBelief(factors, temperature if sample else None)


def decode(belief: FactoredBelief, model: WorldModel) -> np.ndarray:
    return model.decode(belief.factors[None])[0]


def forward_predict(belief: FactoredBelief, action: Action, model: WorldModel) -> FactoredBelief:
    return FactoredBelief(model.forward_predict(belief.factors[None], [int(action)])[0])


def inverse_predict(belief: FactoredBelief, next_belief: FactoredBelief, model: WorldModel) -> np.ndarray:
    return model.inverse_predict(belief.factors[None], next_belief.factors[None])[0]

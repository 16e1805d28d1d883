"""End-to-end stages shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import Config, WorldModelConfig
from .data import Dataset, collect_episodes, load_dataset, save_dataset
from .env import WorldState, render_observation, visibility_mask, world_to_window
from .perspective import Condition, estimate_influence
from .world_model import FactoredBelief, WorldModel


def holdout_split(n_episodes: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic episode-level split: every ``1/fraction``-th episode is held out."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    stride = max(2, int(round(1.0 / fraction)))
    held = np.arange(n_episodes)[::stride]
    return np.setdiff1d(np.arange(n_episodes), held), held


def make_world_model(cfg: WorldModelConfig, view_size: int, steps: int | None = None,
                     verbose: bool = False) -> WorldModel:
    return WorldModel(
        n_factors=cfg.n_factors,
        n_values=cfg.n_values,
        action_dim=cfg.action_dim,
        view_size=view_size,
        hidden_channels=cfg.hidden_channels,
        attention_heads=cfg.attention_heads,
        steps=cfg.steps if steps is None else steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        tau_start=cfg.tau_start,
        tau_end=cfg.tau_end,
        kl_weight=cfg.kl_weight,
        log_every=cfg.log_every,
        random_state=cfg.seed,
        verbose=verbose,
    )


def collect_to_file(cfg: Config, out: str | Path) -> Dataset:
    ds = collect_episodes(cfg.data.episodes, cfg.data.mix, cfg.data.seed, cfg.env)
    save_dataset(ds, out)
    return ds


def train_world_model(cfg: Config, dataset: Dataset | str | Path, out: str | Path | None = None,
                      steps: int | None = None, verbose: bool = False) -> WorldModel:
    """Fit on the training split and optionally save checkpoint + CSV loss log."""
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    train, _ = holdout_split(len(dataset.episodes), cfg.world_model.holdout_fraction)
    model = make_world_model(cfg.world_model, cfg.env.view_size, steps, verbose)
    model.fit(dataset.arrays(train))
    if out is not None:
        model.save(out)
        write_training_log(model, Path(out).with_suffix(".csv"))
    return model


def write_training_log(model: WorldModel, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(asdict(model.history_[0]).keys()) if model.history_ else []
        w.writerow(keys)
        for report in model.history_:
            w.writerow([asdict(report)[k] for k in keys])


def world_model_quality(model: WorldModel, dataset: Dataset, fraction: float) -> dict[str, float]:
    _, held = holdout_split(len(dataset.episodes), fraction)
    arrays = dataset.arrays(held)
    return {
        "reconstruction_accuracy": model.reconstruction_accuracy(arrays["obs"]),
        "inverse_accuracy": model.inverse_accuracy(arrays),
        "heldout_transitions": int(len(arrays["obs"])),
    }


def mutually_visible(state: WorldState, view_size: int = 5) -> bool:
    """Agent sees the POI and the agent's cell lies in the POI's line of sight."""
    if not render_observation(state, state.agent, view_size).poi_visible:
        return False
    loc = world_to_window(state.poi, state.agent.cell, view_size)
    return loc is not None and bool(visibility_mask(state, state.poi, view_size)[loc])


def _kl_rows(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) summed over factor rows, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(np.asarray(q, dtype=np.float64), 1e-300, None)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def shift_fidelity(model: WorldModel, episodes, rng: np.random.Generator,
                   max_len: int = 12) -> dict[str, float]:
    """Compare influence estimates against the POI's true encoded belief.

    Looks at every state in ``episodes`` where the agent and the POI see each
    other and reports the mean ``KL(true || estimate)`` per condition, plus
    how often the perspective shift is strictly closer than the random
    condition's draw and than the flat belief.
    """
    v = model.view_size
    kls: dict[str, list[float]] = {"perfect": [], "shift": [], "random": [], "flat": []}
    fallbacks = 0
    flat = FactoredBelief.uniform(model.n_factors, model.n_values).factors
    for ep in episodes:
        for t in range(len(ep) + 1):
            state = ep.state_at(t)
            if not mutually_visible(state, v):
                continue
            obs = render_observation(state, state.agent, v)
            true = model.encode(render_observation(state, state.poi, v).window[None])[0]
            for cond in (Condition.PERFECT_INFORMATION, Condition.PERSPECTIVE_SHIFT, Condition.UNIFORM_RANDOM):
                est = estimate_influence(cond, obs, model, state=state, rng=rng, max_len=max_len)
                kls[cond.value].append(_kl_rows(true, est.belief.factors))
                fallbacks += est.fallback is not None
            kls["flat"].append(_kl_rows(true, flat))
    n = len(kls["flat"])
    shift, flat_kl, rand_kl = np.array(kls["shift"]), np.array(kls["flat"]), np.array(kls["random"])
    return {
        "states": n,
        "mean_kl": {k: float(np.mean(v)) if v else float("nan") for k, v in kls.items()},
        "shift_win_rate": float(np.mean(shift < rand_kl)) if n else float("nan"),
        "shift_win_rate_vs_flat": float(np.mean(shift < flat_kl)) if n else float("nan"),
        "shift_fallbacks": int(fallbacks),
    }

"""Multi-seed comparison of influence conditions.

Trains one policy per (condition, seed) against a shared frozen world model,
smooths each learning curve with a trailing moving average, and aggregates
across seeds with percentile-bootstrap confidence intervals.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .perspective import Condition
from .policy import train_policy
from .world_model import WorldModel


def bootstrap_ci(samples, resamples: int = 10_000, level: float = 0.95,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("need at least two samples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    means = x[rng.integers(0, len(x), size=(resamples, len(x)))].mean(axis=1)
    low, high = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(low), float(high)


def pointwise_bootstrap(curves: np.ndarray, resamples: int, level: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and bootstrap band of ``(n_seeds, T)`` curves.

    The band is widened where needed so it always contains the mean.
    """
    n = curves.shape[0]
    mean = curves.mean(axis=0)
    idx = rng.integers(0, n, size=(resamples, n))
    boot = curves[idx].mean(axis=1)
    low, high = np.quantile(boot, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return mean, np.minimum(low, mean), np.maximum(high, mean)


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average; the first points average what is available."""
    x = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(x)])
    t = np.arange(1, len(x) + 1)
    start = np.maximum(0, t - window)
    return (c[t] - c[start]) / (t - start)


@dataclass
class RunMetrics:
    condition: str
    seeds: list[int]
    curves: np.ndarray  # (n_seeds, T) raw episodic reward
    smoothed: np.ndarray  # (n_seeds, T)
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    lengths: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def aggregate(condition: str, seeds: list[int], curves: np.ndarray, window: int,
              resamples: int, level: float, lengths: np.ndarray | None = None) -> RunMetrics:
    curves = np.asarray(curves, dtype=np.float64)
    if curves.shape[0] < 2:
        raise ValueError("need at least two seeds per condition for a confidence interval")
    smoothed = np.stack([smooth(c, window) for c in curves])
    rng = np.random.default_rng(1234)
    mean, low, high = pointwise_bootstrap(smoothed, resamples, level, rng)
    return RunMetrics(condition, list(seeds), curves, smoothed, mean, low, high, lengths)


def final_score(metrics: RunMetrics, k: int) -> float:
    """Mean of the last ``k`` points of the smoothed mean curve."""
    n = len(metrics.mean)
    if k < 1 or k > n:
        raise ValueError(f"k={k} outside 1..{n}")
    return float(np.mean(metrics.mean[-k:]))


def seed_final_scores(metrics: RunMetrics, k: int) -> np.ndarray:
    return metrics.smoothed[:, -k:].mean(axis=1)


def ordering_gate(metrics: dict[str, RunMetrics], k: int, resamples: int = 10_000,
                  level: float = 0.95) -> dict:
    """Perfect >= shift >= random on final scores, with the shift and random
    final-window intervals disjoint."""
    scores = {c: final_score(m, k) for c, m in metrics.items()}
    cis = {
        c: bootstrap_ci(seed_final_scores(m, k), resamples, level, np.random.default_rng(99))
        for c, m in metrics.items()
    }
    p, s, r = (Condition.PERFECT_INFORMATION.value, Condition.PERSPECTIVE_SHIFT.value,
               Condition.UNIFORM_RANDOM.value)
    ordered = scores[p] >= scores[s] >= scores[r]
    separated = cis[s][0] > cis[r][1]
    return {
        "final_scores": scores,
        "final_ci": {c: list(v) for c, v in cis.items()},
        "ordered": bool(ordered),
        "shift_random_separated": bool(separated),
        "passed": bool(ordered and separated),
    }


# ---------------------------------------------------------------- io


def _fmt(x: float) -> str:
    return repr(float(x))


def write_seed_csv(path: Path, curve: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "reward", "length"])
        for ep, reward, length in curve:
            w.writerow([int(ep), _fmt(reward), int(length)])


def read_seed_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in row] for row in rows])


def write_curves_csv(path: Path, m: RunMetrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean", "ci_low", "ci_high", *[f"seed_{s}" for s in m.seeds]])
        for t in range(len(m.mean)):
            w.writerow([t, _fmt(m.mean[t]), _fmt(m.ci_low[t]), _fmt(m.ci_high[t]),
                        *[_fmt(c[t]) for c in m.smoothed]])


def plot_curves(metrics: dict[str, RunMetrics], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = {"perfect": "perfect information", "shift": "perspective shift", "random": "random noise"}
    fig, ax = plt.subplots(figsize=(6, 4))
    for cond, m in metrics.items():
        x = np.arange(len(m.mean))
        ax.plot(x, m.mean, label=labels.get(cond, cond))
        ax.fill_between(x, m.ci_low, m.ci_high, alpha=0.25)
    ax.set_xlabel("episode")
    ax.set_ylabel("cumulative episodic reward")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def run_experiment(config: Config, model: WorldModel, out_dir: str | Path,
                   resume: bool = True, progress: bool = False) -> dict[str, RunMetrics]:
    """Train every (condition, seed) pair and write curves, summary and plot.

    Per-seed curves land in ``out_dir/runs``; with ``resume`` an existing
    per-seed file is reused instead of retraining. If a seed fails, the
    condition is abandoned and recorded as partial in ``summary.json``.
    """
    exp = config.experiment
    if len(exp.seeds) < 2:
        raise ValueError("need at least two seeds per condition for a confidence interval")
    out = Path(out_dir)
    runs = out / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    metrics: dict[str, RunMetrics] = {}
    partial: dict[str, dict] = {}
    timings: dict[str, float] = {}
    for cond in exp.conditions:
        cond = Condition(cond).value
        curves = []
        try:
            for seed in exp.seeds:
                path = runs / f"{cond}_seed{seed}.csv"
                if resume and path.exists():
                    curve = read_seed_csv(path)
                    if len(curve) == config.policy.episodes:
                        curves.append(curve)
                        continue
                t0 = time.perf_counter()
                _, curve = train_policy(config.env, model, cond, seed, config.policy, progress=progress)
                timings[f"{cond}_seed{seed}"] = time.perf_counter() - t0
                write_seed_csv(path, curve)
                curves.append(curve)
        except Exception as exc:  # noqa: BLE001 - recorded, then the condition is skipped
            partial[cond] = {"completed_seeds": len(curves), "error": repr(exc)}
            continue
        stacked = np.stack(curves)
        m = aggregate(cond, list(exp.seeds), stacked[:, :, 1], exp.smoothing_window,
                      exp.curve_resamples, exp.level, lengths=stacked[:, :, 2])
        metrics[cond] = m
        write_curves_csv(out / f"curves_{cond}.csv", m)

    summary: dict = {"partial": partial}
    if len(metrics) == len(exp.conditions) and set(metrics) >= {"perfect", "shift", "random"}:
        summary["gate"] = ordering_gate(metrics, exp.final_window, exp.bootstrap_resamples, exp.level)
    else:
        summary["gate"] = None
    summary["final_window"] = exp.final_window
    summary["mean_episode_length"] = {c: float(m.lengths.mean()) for c, m in metrics.items()}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if timings:
        with open(out / "timings.json", "w") as fh:
            json.dump(timings, fh, indent=2, sort_keys=True)
    if metrics:
        plot_curves(metrics, out / "fig4.png")
    return metrics

"""Debug figures: observation, belief heatmaps and perspective-shift rollouts."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .env import Channel, WorldState, render_observation
from .perspective import ObservedPose, plan_imagined_actions
from .world_model import FactoredBelief, WorldModel

# wall, empty, goal, POI, out-of-view
CHANNEL_COLORS = np.array(
    [[0.35, 0.35, 0.35], [0.95, 0.95, 0.95], [0.2, 0.75, 0.3], [0.2, 0.4, 0.9], [0.1, 0.1, 0.1]]
)


def window_image(window: np.ndarray) -> np.ndarray:
    return CHANNEL_COLORS[np.asarray(window)]


def map_image(state: WorldState, view_size: int = 5) -> np.ndarray:
    img = np.where(state.grid[..., None] == 1, 0.35, 0.95) * np.ones(3)
    img[tuple(state.goal)] = CHANNEL_COLORS[Channel.GOAL]
    img[state.agent.cell] = [0.85, 0.2, 0.2]
    img[state.poi.cell] = CHANNEL_COLORS[Channel.POI]
    return img


def shift_panels(state: WorldState, model: WorldModel, path: str | Path, max_len: int = 12) -> dict:
    """Render the perspective-shift breakdown for one state to ``path``.

    Columns step through the imagined plan: the top row shows the agent's
    window (first column) and the POI's true window (last column), then the
    belief after each imagined action and its decoded reconstruction.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    v = model.view_size
    obs = render_observation(state, state.agent, v)
    belief = FactoredBelief(model.encode(obs.window[None])[0])
    target = ObservedPose.from_observation(obs)
    plan = plan_imagined_actions(obs, target, max_len) if target is not None else None
    actions = list(plan) if plan is not None and not plan.blocked else []
    beliefs = [belief.factors]
    for a in actions:
        beliefs.append(model.forward_predict(beliefs[-1][None], [int(a)])[0])
    recons = model.decode(np.stack(beliefs)).argmax(-1)
    true_view = render_observation(state, state.poi, v)

    cols = len(beliefs) + 1
    fig, axes = plt.subplots(4, cols, figsize=(1.8 * cols, 7.2), squeeze=False)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, 0].imshow(map_image(state, v))
    axes[0, 0].set_title("map", fontsize=8)
    axes[0, 1].imshow(window_image(obs.window))
    axes[0, 1].set_title("agent view", fontsize=8)
    axes[0, -1].imshow(window_image(true_view.window))
    axes[0, -1].set_title("POI view (truth)", fontsize=8)
    for k, (b, r) in enumerate(zip(beliefs, recons), start=1):
        axes[1, k].imshow(b, vmin=0, vmax=1, cmap="viridis")
        axes[2, k].text(0.5, 0.5, "start" if k == 1 else actions[k - 2].name.lower(),
                        ha="center", va="center", fontsize=8)
        axes[3, k].imshow(window_image(r))
    axes[1, 0].text(0.5, 0.5, "beliefs", ha="center", va="center", fontsize=8)
    axes[2, 0].text(0.5, 0.5, "imagined\naction", ha="center", va="center", fontsize=8)
    axes[3, 0].text(0.5, 0.5, "decoded", ha="center", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return {
        "poi_visible": target is not None,
        "plan": [a.name for a in actions],
        "blocked": bool(plan.blocked) if plan is not None else None,
    }

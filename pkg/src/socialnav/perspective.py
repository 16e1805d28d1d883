"""Estimating the POI's belief by imagined navigation.

The agent reads the POI's cell and facing from its own window, plans a
shortest turn/forward route to that pose using only what the window shows,
and rolls its learned forward model along the route without looking at the
world again. The belief at the end of the rollout is the estimate of what
the POI currently perceives.

Two reference estimates are provided next to it: independent flat-Dirichlet
noise, and the encoding of the POI's true view (needs the global state).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .env import HEADING_DELTAS, Action, Channel, EgoObservation, WorldState, render_observation
from .world_model import FactoredBelief, WorldModel

_TRAVERSABLE = (Channel.EMPTY, Channel.GOAL, Channel.POI)


class Condition(str, Enum):
    PERSPECTIVE_SHIFT = "shift"
    UNIFORM_RANDOM = "random"
    PERFECT_INFORMATION = "perfect"


@dataclass(frozen=True)
class ObservedPose:
    """POI pose in window coordinates (heading 0 = facing up the window)."""

    rel_row: int
    rel_col: int
    heading: int

    @classmethod
    def from_observation(cls, obs: EgoObservation) -> ObservedPose | None:
        cells = np.argwhere(obs.window == Channel.POI)
        if len(cells) == 0 or obs.poi_heading is None:
            return None
        i, j = cells[0]
        return cls(int(i), int(j), int(obs.poi_heading))


@dataclass(frozen=True)
class ImaginedPlan:
    actions: tuple[Action, ...]
    blocked: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)


@dataclass
class InfluenceEstimate:
    belief: FactoredBelief
    source: Condition
    imagined_plan: ImaginedPlan | None = None
    fallback: str | None = None  # "not_visible" or "blocked" when a shift degraded

    def __post_init__(self):
        if (self.imagined_plan is not None) != (self.source == Condition.PERSPECTIVE_SHIFT):
            raise ValueError("imagined_plan is present exactly when source is PERSPECTIVE_SHIFT")


def _turn(heading: int, action: Action) -> int:
    return (heading - 1) % 4 if action == Action.TURN_LEFT else (heading + 1) % 4


def plan_imagined_actions(obs: EgoObservation, target: ObservedPose, max_len: int = 12) -> ImaginedPlan:
    """Shortest turn/forward sequence from the viewer's pose to ``target``
    through cells the window shows as free.

    Walls and out-of-view cells are not traversable. Ties between equally
    short plans go to the lowest action index at each step. If the target
    cannot be reached within ``max_len`` actions the plan is empty and
    ``blocked`` is set.
    """
    v = obs.view_size
    free = np.isin(obs.window, _TRAVERSABLE)
    start = (v - 1, v // 2, 0)
    goal = (target.rel_row, target.rel_col, target.heading % 4)
    if not (0 <= goal[0] < v and 0 <= goal[1] < v) or not free[goal[0], goal[1]]:
        return ImaginedPlan((), blocked=True)

    # distance-to-goal by BFS over reversed edges
    dist = np.full((v, v, 4), -1, dtype=np.int64)
    dist[goal] = 0
    queue = deque([goal])
    while queue:
        i, j, h = queue.popleft()
        d = dist[i, j, h] + 1
        preds = [(i, j, (h + 1) % 4), (i, j, (h - 1) % 4)]  # undo a left / right turn
        di, dj = HEADING_DELTAS[h]
        pi, pj = i - int(di), j - int(dj)
        if 0 <= pi < v and 0 <= pj < v and free[pi, pj]:
            preds.append((pi, pj, h))
        for p in preds:
            if dist[p] < 0:
                dist[p] = d
                queue.append(p)

    if dist[start] < 0 or dist[start] > max_len:
        return ImaginedPlan((), blocked=True)

    plan: list[Action] = []
    i, j, h = start
    while dist[i, j, h] > 0:
        for action in Action:
            if action == Action.FORWARD:
                di, dj = HEADING_DELTAS[h]
                ni, nj, nh = i + int(di), j + int(dj), h
                if not (0 <= ni < v and 0 <= nj < v and free[ni, nj]):
                    continue
            else:
                ni, nj, nh = i, j, _turn(h, action)
            if dist[ni, nj, nh] == dist[i, j, h] - 1:
                plan.append(action)
                i, j, h = ni, nj, nh
                break
    return ImaginedPlan(tuple(plan))


def uniform_estimate(model: WorldModel, reason: str) -> InfluenceEstimate:
    return InfluenceEstimate(
        FactoredBelief.uniform(model.n_factors, model.n_values),
        Condition.UNIFORM_RANDOM,
        fallback=reason,
    )


def apply_perspective_shift(
    belief: FactoredBelief,
    obs: EgoObservation,
    target: ObservedPose,
    model: WorldModel,
    max_len: int = 12,
) -> InfluenceEstimate:
    """Roll the forward model from ``belief`` along the imagined plan.

    No imagined observation is re-encoded on the way. A blocked plan yields
    the flat belief with ``source=UNIFORM_RANDOM`` and ``fallback="blocked"``.
    """
    plan = plan_imagined_actions(obs, target, max_len)
    if plan.blocked:
        return uniform_estimate(model, "blocked")
    factors = belief.factors
    for action in plan:
        factors = model.forward_predict(factors[None], [int(action)])[0]
    return InfluenceEstimate(FactoredBelief(factors), Condition.PERSPECTIVE_SHIFT, imagined_plan=plan)


def dirichlet_belief(rng: np.random.Generator, n_factors: int = 8, n_values: int = 8) -> FactoredBelief:
    """Each row an independent draw from the flat Dirichlet over ``n_values``."""
    return FactoredBelief(rng.dirichlet(np.ones(n_values), size=n_factors))


def estimate_influence(
    condition: Condition | str,
    obs: EgoObservation,
    model: WorldModel,
    belief: FactoredBelief | None = None,
    state: WorldState | None = None,
    rng: np.random.Generator | None = None,
    max_len: int = 12,
) -> InfluenceEstimate:
    """Influence estimate for one of the three conditions.

    ``belief`` defaults to ``encode(obs)``; ``state`` (the global snapshot)
    is required for the perfect-information condition and ``rng`` for the
    random one.
    """
    condition = Condition(condition)
    if condition == Condition.UNIFORM_RANDOM:
        if rng is None:
            raise ValueError("the random condition needs an rng")
        return InfluenceEstimate(dirichlet_belief(rng, model.n_factors, model.n_values), condition)
    if condition == Condition.PERFECT_INFORMATION:
        if state is None:
            raise ValueError("the perfect-information condition needs the global state")
        true_view = render_observation(state, state.poi, model.view_size)
        return InfluenceEstimate(FactoredBelief(model.encode(true_view.window[None])[0]), condition)
    target = ObservedPose.from_observation(obs)
    if target is None:
        return uniform_estimate(model, "not_visible")
    if belief is None:
        belief = FactoredBelief(model.encode(obs.window[None])[0])
    return apply_perspective_shift(belief, obs, target, model, max_len)

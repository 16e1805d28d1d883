import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from socialnav.env import Action, Channel, EgoObservation, render_observation
from socialnav.perspective import (
    Condition,
    ImaginedPlan,
    InfluenceEstimate,
    ObservedPose,
    apply_perspective_shift,
    dirichlet_belief,
    estimate_influence,
    plan_imagined_actions,
)
from socialnav.validation import is_row_stochastic
from socialnav.world_model import FactoredBelief

V = 5
VIEWER = (V - 1, V // 2, 0)
# window-frame heading deltas: 0 = up the window, then clockwise
DELTAS = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}


def open_window():
    w = np.full((V, V), Channel.EMPTY, dtype=np.int8)
    return w


def with_poi(window, row, col, heading):
    w = window.copy()
    w[row, col] = Channel.POI
    return EgoObservation(w, heading)


def floyd_warshall_length(window, target):
    """All-pairs shortest paths over (row, col, heading) nodes of the window."""
    free = np.isin(window, (Channel.EMPTY, Channel.GOAL, Channel.POI))
    nodes = [(i, j, h) for i in range(V) for j in range(V) for h in range(4) if free[i, j]]
    index = {n: k for k, n in enumerate(nodes)}
    dist = np.full((len(nodes), len(nodes)), np.inf)
    np.fill_diagonal(dist, 0)
    for (i, j, h), k in index.items():
        dist[k, index[(i, j, (h + 1) % 4)]] = 1
        dist[k, index[(i, j, (h - 1) % 4)]] = 1
        di, dj = DELTAS[h]
        if (i + di, j + dj, h) in index:
            dist[k, index[(i + di, j + dj, h)]] = 1
    for m in range(len(nodes)):
        dist = np.minimum(dist, dist[:, m : m + 1] + dist[m : m + 1, :])
    if VIEWER not in index or target not in index:
        return np.inf
    return dist[index[VIEWER], index[target]]


def simulate(window, actions):
    i, j, h = VIEWER
    for a in actions:
        if a == Action.TURN_LEFT:
            h = (h - 1) % 4
        elif a == Action.TURN_RIGHT:
            h = (h + 1) % 4
        else:
            i, j = i + DELTAS[h][0], j + DELTAS[h][1]
            assert 0 <= i < V and 0 <= j < V
            assert window[i, j] in (Channel.EMPTY, Channel.GOAL, Channel.POI)
    return i, j, h


# ---------------------------------------------------------------- planning


def test_own_pose_gives_empty_plan():
    obs = EgoObservation(open_window(), None)
    plan = plan_imagined_actions(obs, ObservedPose(*VIEWER))
    assert plan.actions == () and not plan.blocked


def test_poi_two_ahead_same_heading():
    obs = with_poi(open_window(), 2, 2, 0)
    plan = plan_imagined_actions(obs, ObservedPose.from_observation(obs))
    assert plan.actions == (Action.FORWARD, Action.FORWARD)


def test_poi_facing_back_needs_two_turns():
    obs = with_poi(open_window(), 3, 2, 2)
    plan = plan_imagined_actions(obs, ObservedPose.from_observation(obs))
    assert len(plan) == 3 and plan.actions[0] == Action.FORWARD
    assert simulate(obs.window, plan.actions) == (3, 2, 2)


def test_walled_off_poi_is_blocked():
    w = open_window()
    w[3, :] = Channel.WALL
    obs = with_poi(w, 1, 2, 0)
    plan = plan_imagined_actions(obs, ObservedPose.from_observation(obs))
    assert plan.blocked and plan.actions == ()


def test_out_of_view_cells_are_not_traversable():
    w = open_window()
    w[3, :] = Channel.OUT_OF_VIEW
    obs = with_poi(w, 1, 2, 0)
    assert plan_imagined_actions(obs, ObservedPose.from_observation(obs)).blocked


def test_max_len_blocks_long_plans():
    obs = with_poi(open_window(), 0, 0, 2)
    target = ObservedPose.from_observation(obs)
    full = plan_imagined_actions(obs, target)
    assert not full.blocked
    assert plan_imagined_actions(obs, target, max_len=len(full) - 1).blocked


window_cells = st.sampled_from([Channel.EMPTY, Channel.EMPTY, Channel.EMPTY, Channel.WALL,
                                Channel.GOAL, Channel.OUT_OF_VIEW])


@settings(max_examples=300, deadline=None)
@given(arrays(np.int8, (V, V), elements=window_cells), st.integers(0, V - 1), st.integers(0, V - 1),
       st.integers(0, 3))
def test_plan_length_matches_exhaustive_search(window, row, col, heading):
    window[VIEWER[0], VIEWER[1]] = Channel.EMPTY
    assume((row, col) != VIEWER[:2])
    obs = with_poi(window, row, col, heading)
    target = (row, col, heading)
    plan = plan_imagined_actions(obs, ObservedPose(*target), max_len=100)
    best = floyd_warshall_length(obs.window, target)
    if np.isinf(best):
        assert plan.blocked
    else:
        assert not plan.blocked and len(plan) == best
        assert simulate(obs.window, plan.actions) == target


def test_plan_length_on_dataset_observations(small_dataset):
    checked = 0
    for ep in small_dataset.episodes:
        for t in range(len(ep) + 1):
            obs = ep.observation_at(t)
            target = ObservedPose.from_observation(obs)
            if target is None:
                continue
            pose = (target.rel_row, target.rel_col, target.heading)
            plan = plan_imagined_actions(obs, target, max_len=100)
            best = floyd_warshall_length(obs.window, pose)
            assert (plan.blocked and np.isinf(best)) or len(plan) == best
            checked += 1
    assert checked > 20


# ---------------------------------------------------------------- shift and conditions


def test_zero_plan_returns_input_belief(small_model):
    obs = EgoObservation(open_window(), None)
    belief = FactoredBelief(small_model.encode(obs.window)[0])
    est = apply_perspective_shift(belief, obs, ObservedPose(*VIEWER), small_model)
    assert est.source == Condition.PERSPECTIVE_SHIFT
    assert est.imagined_plan.actions == ()
    assert np.array_equal(est.belief.factors, belief.factors)


def test_shift_rolls_forward_model_along_plan(small_model):
    obs = with_poi(open_window(), 2, 2, 0)
    belief = FactoredBelief(small_model.encode(obs.window)[0])
    est = apply_perspective_shift(belief, obs, ObservedPose.from_observation(obs), small_model)
    expected = belief.factors
    for _ in range(2):
        expected = small_model.forward_predict(expected[None], [int(Action.FORWARD)])[0]
    assert np.array_equal(est.belief.factors, expected)
    again = apply_perspective_shift(belief, obs, ObservedPose.from_observation(obs), small_model)
    assert np.array_equal(again.belief.factors, est.belief.factors)


def test_blocked_plan_degrades_to_uniform(small_model):
    w = open_window()
    w[3, :] = Channel.WALL
    obs = with_poi(w, 1, 2, 0)
    belief = FactoredBelief(small_model.encode(obs.window)[0])
    est = apply_perspective_shift(belief, obs, ObservedPose.from_observation(obs), small_model)
    assert est.source == Condition.UNIFORM_RANDOM and est.fallback == "blocked"
    assert np.array_equal(est.belief.factors, np.full((8, 8), 1 / 8))


def test_invisible_poi_falls_back_to_uniform(small_model):
    obs = EgoObservation(open_window(), None)
    est = estimate_influence("shift", obs, small_model)
    assert est.source == Condition.UNIFORM_RANDOM
    assert est.fallback == "not_visible"
    assert est.imagined_plan is None


def test_random_condition_draws_positive_dirichlet_rows(small_model, rng):
    obs = EgoObservation(open_window(), None)
    est = estimate_influence(Condition.UNIFORM_RANDOM, obs, small_model, rng=rng)
    assert est.source == Condition.UNIFORM_RANDOM and est.fallback is None
    assert (est.belief.factors > 0).all()
    assert is_row_stochastic(est.belief.factors, 1e-6)
    with pytest.raises(ValueError):
        estimate_influence(Condition.UNIFORM_RANDOM, obs, small_model)


def test_dirichlet_rows_have_flat_mean():
    draws = np.stack([dirichlet_belief(np.random.default_rng(s)).factors for s in range(400)])
    assert np.allclose(draws.mean(axis=(0, 1)), 1 / 8, atol=0.01)


def test_perfect_information_is_poi_view_encoding(small_model, small_dataset):
    ep = small_dataset.episodes[0]
    for t in range(len(ep) + 1):
        state = ep.state_at(t)
        est = estimate_influence("perfect", ep.observation_at(t), small_model, state=state)
        view = render_observation(state, state.poi)
        assert np.array_equal(est.belief.factors, small_model.encode(view.window)[0])
        assert est.source == Condition.PERFECT_INFORMATION
    with pytest.raises(ValueError):
        estimate_influence("perfect", ep.observation_at(0), small_model)


def test_unknown_condition_rejected(small_model):
    with pytest.raises(ValueError):
        estimate_influence("telepathy", EgoObservation(open_window(), None), small_model)


def test_estimate_requires_plan_exactly_for_shift():
    b = FactoredBelief.uniform()
    with pytest.raises(ValueError):
        InfluenceEstimate(b, Condition.PERSPECTIVE_SHIFT)
    with pytest.raises(ValueError):
        InfluenceEstimate(b, Condition.UNIFORM_RANDOM, imagined_plan=ImaginedPlan(()))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 11), st.integers(0, 200), st.sampled_from(list(Condition)), st.integers(0, 2**32 - 1))
def test_all_conditions_emit_valid_beliefs(small_model, small_dataset, ep_index, t, condition, seed):
    ep = small_dataset.episodes[ep_index]
    t = t % (len(ep) + 1)
    est = estimate_influence(condition, ep.observation_at(t), small_model, state=ep.state_at(t),
                             rng=np.random.default_rng(seed))
    assert est.belief.shape == (8, 8)
    assert is_row_stochastic(est.belief.factors, 1e-6)

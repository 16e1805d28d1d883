from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socialnav.config import EnvConfig, RewardConfig
from socialnav.env import (
    Action,
    Cell,
    Channel,
    GridEnv,
    Heading,
    Pose,
    TerminalStateError,
    generate_map,
    parse_ascii,
    poi_policy_step,
    render_ascii,
    render_observation,
    step,
    visibility_mask,
    world_to_window,
)

from oracles import bfs_length, line_of_sight_oracle, random_pose, reachable

EMPTY_ROOM = """
#########
#P......#
#.......#
#.......#
#.......#
#.......#
#.......#
#A.....G#
#########
"""


# ---------------------------------------------------------------- maps


def test_border_is_wall():
    state = generate_map(7, 9)
    border = np.concatenate([state.grid[0], state.grid[-1], state.grid[1:-1, 0], state.grid[1:-1, -1]])
    assert border.shape == (32,)
    assert (border == Cell.WALL).all()


def test_generate_map_is_deterministic():
    assert generate_map(11) == generate_map(11)
    assert generate_map(11) != generate_map(12)


@pytest.mark.parametrize("size", [4, 8, 3])
def test_generate_map_rejects_bad_sizes(size):
    with pytest.raises(ValueError):
        generate_map(0, size)


def test_generated_maps_are_solvable_over_1000_seeds():
    for seed in range(1000):
        state = generate_map(seed)
        region = reachable(state.grid, state.poi.cell)
        assert tuple(state.goal) in region, seed
        assert state.agent.cell in region, seed
        assert state.agent.cell != state.poi.cell
        assert state.grid[state.agent.cell] == Cell.EMPTY and state.grid[state.poi.cell] == Cell.EMPTY


def test_ascii_round_trip():
    state = parse_ascii(EMPTY_ROOM)
    assert render_ascii(state) == EMPTY_ROOM.strip()


# ---------------------------------------------------------------- rendering


def test_visibility_matches_line_of_sight_oracle_on_1000_states():
    rng = np.random.default_rng(2024)
    for k in range(1000):
        state = generate_map(int(rng.integers(1 << 30)))
        pose = random_pose(state, rng)
        expected = line_of_sight_oracle(state, pose)
        assert np.array_equal(visibility_mask(state, pose), expected), (k, pose, render_ascii(state))
        window = render_observation(state, pose).window
        assert np.array_equal(window != Channel.OUT_OF_VIEW, expected)


def test_wall_row_ahead_hides_everything_beyond():
    state = parse_ascii("""
        #########
        #.......#
        #.......#
        #.......#
        #########
        #...A...#
        #.......#
        #P.....G#
        #########
    """)
    window = render_observation(state, state.agent).window
    assert (window[:3] == Channel.OUT_OF_VIEW).all()
    # the outer wall cells sit behind the inner ones
    assert (window[3, 1:4] == Channel.WALL).all()
    assert window[3, 0] == window[3, 4] == Channel.OUT_OF_VIEW
    assert window[4, 2] == Channel.EMPTY


def test_render_from_poi_pose_is_the_poi_view():
    state = parse_ascii(EMPTY_ROOM, agent_heading=Heading.NORTH, poi_heading=Heading.SOUTH)
    obs = render_observation(state, state.poi)
    # the viewer never sees itself; facing south from (1,1) the agent at (7,1)
    # is 6 rows away and out of the window
    assert not obs.poi_visible
    assert obs.window[4, 2] == Channel.EMPTY
    # the POI's left (east) side is inside the room, its right (west) side is wall
    assert obs.window[4, 1] == Channel.EMPTY and obs.window[4, 3] == Channel.WALL


def test_poi_channel_and_relative_heading():
    state = parse_ascii("""
        #########
        #.......#
        #...P...#
        #.......#
        #...A...#
        #.......#
        #.......#
        #......G#
        #########
    """, agent_heading=Heading.NORTH, poi_heading=Heading.EAST)
    obs = render_observation(state, state.agent)
    assert obs.window[2, 2] == Channel.POI
    assert obs.poi_heading == 1
    assert world_to_window(state.agent, state.poi.cell, 5) == (2, 2)


def test_render_rejects_invalid_pose():
    state = parse_ascii(EMPTY_ROOM)
    with pytest.raises(ValueError):
        render_observation(state, Pose(0, 0, Heading.NORTH))
    with pytest.raises(ValueError):
        render_observation(state, Pose(20, 3, Heading.NORTH))


# ---------------------------------------------------------------- dynamics


def still_config(**reward):
    return EnvConfig(p_pause=1.0, reward=RewardConfig(**reward))


def test_forward_into_wall_is_a_collision():
    state = parse_ascii(EMPTY_ROOM, agent_heading=Heading.WEST)
    new, out = step(state, Action.FORWARD, still_config(), np.random.default_rng(0))
    assert new.agent == state.agent
    assert out.info["collision"]
    assert out.reward == pytest.approx(RewardConfig().r_collision)


def test_forward_into_poi_is_a_collision():
    state = parse_ascii("""
        #######
        #.....#
        #..P..#
        #..A..#
        #....G#
        #######
    """)
    new, out = step(state, Action.FORWARD, still_config(), np.random.default_rng(0))
    assert new.agent == state.agent and out.info["collision"]


def test_turning_next_to_poi_earns_the_proximity_reward():
    state = parse_ascii("""
        #######
        #.....#
        #..P..#
        #..A..#
        #....G#
        #######
    """)
    cfg = still_config()
    new, out = step(state, Action.TURN_LEFT, cfg, np.random.default_rng(0))
    visible = line_of_sight_oracle(new, new.agent)[world_to_window(new.agent, new.poi.cell, 5)]
    assert visible
    assert out.reward == pytest.approx(cfg.reward.r_near * visible)
    assert not out.info["collision"]


def test_poi_reaching_goal_terminates_with_goal_reward():
    state = parse_ascii("""
        #######
        #.....#
        #.....#
        #.A.PG#
        #######
    """, agent_heading=Heading.EAST, poi_heading=Heading.EAST)
    cfg = EnvConfig(p_pause=0.0)
    new, out = step(state, Action.TURN_LEFT, cfg, np.random.default_rng(0))
    assert new.poi.cell == new.goal
    assert out.terminated and not out.truncated
    assert out.reward >= cfg.reward.r_goal
    with pytest.raises(TerminalStateError):
        step(new, Action.FORWARD, cfg, np.random.default_rng(0))


def test_straying_too_far_truncates():
    state = parse_ascii("""
        ###########
        #..A.....P#
        #.........#
        #........G#
        ###########
    """, agent_heading=Heading.WEST)
    assert state.poi.col - state.agent.col == RewardConfig().d_far
    new, out = step(state, Action.FORWARD, still_config(), np.random.default_rng(0))
    assert new.agent.col == 2
    assert out.truncated and not out.terminated


def test_max_steps_truncates():
    state = replace(parse_ascii(EMPTY_ROOM), step_count=99)
    # agent and POI are six apart in Manhattan distance, right at the limit
    _, out = step(state, Action.TURN_LEFT, still_config(), np.random.default_rng(0))
    assert out.truncated


def test_poi_one_step_from_goal_arrives():
    state = parse_ascii("""
        #######
        #A....#
        #...PG#
        #######
    """)
    assert poi_policy_step(state, np.random.default_rng(0), p_pause=0.0).cell == state.goal


def test_poi_pause_probability_one_keeps_pose():
    state = parse_ascii(EMPTY_ROOM)
    for seed in range(20):
        assert poi_policy_step(state, np.random.default_rng(seed), p_pause=1.0) == state.poi


def test_poi_crosses_empty_room_in_bfs_length_steps():
    state = parse_ascii(EMPTY_ROOM)
    expected = bfs_length(state.grid, state.poi.cell, tuple(state.goal))
    assert expected == 12
    rng = np.random.default_rng(0)
    steps = 0
    while state.poi.cell != tuple(state.goal):
        state = replace(state, poi=poi_policy_step(state, rng, p_pause=0.0))
        steps += 1
        assert state.poi.cell != state.agent.cell
    assert steps == expected


def test_poi_never_enters_agent_cell():
    state = parse_ascii("""
        #######
        #P.A.G#
        #######
    """)
    for seed in range(10):
        assert poi_policy_step(state, np.random.default_rng(seed), 0.0).cell != state.agent.cell


# ---------------------------------------------------------------- properties


def rollout(seed, actions, config=None):
    env = GridEnv(config or EnvConfig())
    env.reset(seed)
    grid, goal = env.state.grid.copy(), env.state.goal
    states, outcomes = [env.state], []
    for a in actions:
        out = env.step(Action(a))
        outcomes.append(out)
        states.append(env.state)
        assert np.array_equal(env.state.grid, grid) and env.state.goal == goal
        if out.terminated or out.truncated:
            break
    return states, outcomes


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.integers(0, 2), min_size=1, max_size=40))
def test_trajectories_are_deterministic_and_bounded(seed, actions):
    cfg = RewardConfig()
    s1, o1 = rollout(seed, actions)
    s2, o2 = rollout(seed, actions)
    assert s1 == s2
    assert [o.reward for o in o1] == [o.reward for o in o2]
    for o in o1:
        assert cfg.r_collision <= o.reward <= cfg.r_near + cfg.r_goal
        assert o.observation.window.shape == (5, 5)
    for s in s1:
        assert s.agent.cell != s.poi.cell
        assert s.grid[s.agent.cell] != Cell.WALL and s.grid[s.poi.cell] != Cell.WALL

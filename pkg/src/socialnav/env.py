"""Partially observable person-following gridworld.

The agent follows a person of interest (POI) who walks to a goal cell the
agent does not know about. The agent sees a ``view_size x view_size`` window
ahead of it, with walls casting shadows, and gets reward for keeping the POI
in sight and nearby.

All state is immutable: :func:`step` returns a fresh :class:`WorldState`.
Randomness (map layout, POI pauses) comes only from explicit seeds or
``numpy.random.Generator`` arguments, so trajectories are reproducible.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .config import EnvConfig, RewardConfig


class Cell(IntEnum):
    EMPTY = 0
    WALL = 1
    GOAL = 2


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2


class Channel(IntEnum):
    WALL = 0
    EMPTY = 1
    GOAL = 2
    POI = 3
    OUT_OF_VIEW = 4


N_ACTIONS = len(Action)
N_CHANNELS = len(Channel)

# (d_row, d_col) for each heading
HEADING_DELTAS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)], dtype=np.int64)


class TerminalStateError(RuntimeError):
    """Raised when stepping a state whose episode already ended."""


class MapGenerationError(RuntimeError):
    """Raised when no solvable layout was found within the attempt budget."""


@dataclass(frozen=True)
class Pose:
    row: int
    col: int
    heading: Heading

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)

    def turned(self, action: Action) -> Pose:
        if action == Action.TURN_LEFT:
            return Pose(self.row, self.col, Heading((self.heading - 1) % 4))
        if action == Action.TURN_RIGHT:
            return Pose(self.row, self.col, Heading((self.heading + 1) % 4))
        return self

    def ahead(self) -> tuple[int, int]:
        dr, dc = HEADING_DELTAS[self.heading]
        return (self.row + int(dr), self.col + int(dc))


@dataclass(frozen=True, eq=False)
class WorldState:
    """Full configuration of one episode step (the global state)."""

    grid: np.ndarray
    agent: Pose
    poi: Pose
    goal: tuple[int, int]
    step_count: int = 0

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.int8, copy=True)
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            self.agent == other.agent
            and self.poi == other.poi
            and tuple(self.goal) == tuple(other.goal)
            and self.step_count == other.step_count
            and np.array_equal(self.grid, other.grid)
        )

    __hash__ = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def in_bounds(self, row: int, col: int) -> bool:
        h, w = self.grid.shape
        return 0 <= row < h and 0 <= col < w

    def is_wall(self, row: int, col: int) -> bool:
        return not self.in_bounds(row, col) or self.grid[row, col] == Cell.WALL


@dataclass(frozen=True, eq=False)
class EgoObservation:
    """Egocentric window: channel index per cell plus the POI's facing.

    ``window[i, j]`` holds a :class:`Channel` value. The viewer sits at the
    bottom-center cell ``(V-1, V//2)`` facing up (towards row 0).
    ``poi_heading`` is the POI's heading relative to the viewer
    (0 = same direction, 1 = turned right, ...) when the POI is in view,
    else ``None``.
    """

    window: np.ndarray
    poi_heading: int | None = None

    def __post_init__(self):
        window = np.array(self.window, dtype=np.int8, copy=True)
        window.flags.writeable = False
        object.__setattr__(self, "window", window)

    def __eq__(self, other):
        if not isinstance(other, EgoObservation):
            return NotImplemented
        return self.poi_heading == other.poi_heading and np.array_equal(self.window, other.window)

    __hash__ = None

    @property
    def view_size(self) -> int:
        return self.window.shape[0]

    @property
    def poi_visible(self) -> bool:
        return bool((self.window == Channel.POI).any())

    def one_hot(self) -> np.ndarray:
        """``(V, V, N_CHANNELS)`` float32 one-hot encoding."""
        return np.eye(N_CHANNELS, dtype=np.float32)[self.window]

    def key(self) -> bytes:
        return self.window.tobytes()


@dataclass(frozen=True)
class StepOutcome:
    observation: EgoObservation
    reward: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------- geometry


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def manhattan(a: tuple[int, int], b: tuple[int, int]) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def window_to_world(pose: Pose, view_size: int) -> tuple[np.ndarray, np.ndarray]:
    """World (row, col) arrays of shape (V, V) for every window cell."""
    v = view_size
    i, j = np.meshgrid(np.arange(v), np.arange(v), indexing="ij")
    fwd = (v - 1) - i
    lat = j - v // 2
    f = HEADING_DELTAS[pose.heading]
    r = HEADING_DELTAS[(pose.heading + 1) % 4]
    rows = pose.row + fwd * f[0] + lat * r[0]
    cols = pose.col + fwd * f[1] + lat * r[1]
    return rows, cols


def world_to_window(pose: Pose, cell: tuple[int, int], view_size: int) -> tuple[int, int] | None:
    """Window indices of a world cell, or None if it falls outside the window."""
    dr, dc = cell[0] - pose.row, cell[1] - pose.col
    f = HEADING_DELTAS[pose.heading]
    r = HEADING_DELTAS[(pose.heading + 1) % 4]
    fwd = int(dr * f[0] + dc * f[1])
    lat = int(dr * r[0] + dc * r[1])
    i, j = view_size - 1 - fwd, lat + view_size // 2
    if 0 <= i < view_size and 0 <= j < view_size:
        return i, j
    return None


def _segment_crosses_open_cell(
    start: tuple[int, int], end: tuple[int, int], cell: tuple[int, int]
) -> bool:
    """Whether the open segment between two cell centers meets a cell's open interior.

    Exact (rational) slab clipping; cells are unit squares centered on
    integer coordinates.
    """
    lo, hi = Fraction(0), Fraction(1)
    for axis in range(2):
        p0 = Fraction(start[axis])
        d = Fraction(end[axis] - start[axis])
        a, b = Fraction(cell[axis]) - Fraction(1, 2), Fraction(cell[axis]) + Fraction(1, 2)
        if d == 0:
            if not (a < p0 < b):
                return False
            continue
        t1, t2 = (a - p0) / d, (b - p0) / d
        if t1 > t2:
            t1, t2 = t2, t1
        lo, hi = max(lo, t1), min(hi, t2)
    return lo < hi


@lru_cache(maxsize=None)
def shadow_table(view_size: int) -> np.ndarray:
    """Boolean ``(V*V, V*V)`` matrix: entry ``[t, b]`` is True when an opaque
    cell ``b`` hides cell ``t`` from the viewer.

    Only depends on window geometry, so it is computed once per view size.
    """
    v = view_size
    viewer = (v - 1, v // 2)
    cells = [(i, j) for i in range(v) for j in range(v)]
    table = np.zeros((v * v, v * v), dtype=bool)
    for t, target in enumerate(cells):
        if target == viewer:
            continue
        for b, blocker in enumerate(cells):
            if blocker in (target, viewer):
                continue
            table[t, b] = _segment_crosses_open_cell(viewer, target, blocker)
    table.flags.writeable = False
    return table


def visibility_mask(state: WorldState, pose: Pose, view_size: int = 5) -> np.ndarray:
    """``(V, V)`` bool mask of window cells in line of sight of ``pose``."""
    rows, cols = window_to_world(pose, view_size)
    h, w = state.grid.shape
    in_map = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    opaque = ~in_map
    opaque[in_map] = state.grid[rows[in_map], cols[in_map]] == Cell.WALL
    shadowed = (shadow_table(view_size) & opaque.reshape(1, -1)).any(axis=1)
    return (~shadowed & in_map.reshape(-1)).reshape(view_size, view_size)


def render_observation(state: WorldState, pose: Pose, view_size: int = 5) -> EgoObservation:
    """Render the egocentric window seen from an arbitrary pose.

    The viewer's own cell shows its terrain; the POI shows up only when it is
    in line of sight and is not the viewer itself.
    """
    if not state.in_bounds(pose.row, pose.col) or state.is_wall(pose.row, pose.col):
        raise ValueError(f"pose {pose} is not a free cell of the map")
    rows, cols = window_to_world(pose, view_size)
    visible = visibility_mask(state, pose, view_size)
    window = np.full((view_size, view_size), Channel.OUT_OF_VIEW, dtype=np.int8)
    terrain = state.grid[rows[visible], cols[visible]]
    window[visible] = np.choose(terrain, [Channel.EMPTY, Channel.WALL, Channel.GOAL])
    poi_heading = None
    if state.poi.cell != pose.cell:
        loc = world_to_window(pose, state.poi.cell, view_size)
        if loc is not None and visible[loc]:
            window[loc] = Channel.POI
            poi_heading = int((state.poi.heading - pose.heading) % 4)
    return EgoObservation(window, poi_heading)


# ---------------------------------------------------------------- search


def bfs_distances(
    grid: np.ndarray, source: tuple[int, int], blocked: tuple[int, int] | None = None
) -> np.ndarray:
    """4-connected BFS distances from ``source`` over non-wall cells (-1 = unreachable)."""
    h, w = grid.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    if grid[source] == Cell.WALL or source == blocked:
        return dist
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in HEADING_DELTAS:
            nr, nc = r + int(dr), c + int(dc)
            if 0 <= nr < h and 0 <= nc < w and dist[nr, nc] < 0:
                if grid[nr, nc] != Cell.WALL and (nr, nc) != blocked:
                    dist[nr, nc] = dist[r, c] + 1
                    queue.append((nr, nc))
    return dist


# ---------------------------------------------------------------- maps


def generate_map(seed: int, size: int = 9, max_attempts: int = 200) -> WorldState:
    """Random bordered map with scattered interior walls.

    The goal is placed at least ``size - 1`` BFS steps away from the POI so
    every episode involves a real walk, and the agent starts within two cells
    of the POI. Layouts that fail the reachability checks are redrawn.
    """
    if size < 5 or size % 2 == 0:
        raise ValueError(f"size must be odd and >= 5, got {size}")
    rng = np.random.default_rng(seed)
    n_interior = (size - 2) ** 2
    min_goal_dist = size - 1
    for _ in range(max_attempts):
        grid = np.zeros((size, size), dtype=np.int8)
        grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = Cell.WALL
        interior = [(r, c) for r in range(1, size - 1) for c in range(1, size - 1)]
        n_walls = int(rng.integers(n_interior // 10, n_interior // 5 + 1))
        for k in rng.choice(len(interior), size=n_walls, replace=False):
            grid[interior[k]] = Cell.WALL
        free = [cell for cell in interior if grid[cell] == Cell.EMPTY]
        if len(free) < 3:
            continue
        goal = free[int(rng.integers(len(free)))]
        from_goal = bfs_distances(grid, goal)
        poi_options = [cell for cell in free if from_goal[cell] >= min_goal_dist]
        if not poi_options:
            continue
        poi_cell = poi_options[int(rng.integers(len(poi_options)))]
        from_poi = bfs_distances(grid, poi_cell)
        agent_options = [
            cell
            for cell in free
            if cell not in (poi_cell, goal) and 0 < from_poi[cell] and manhattan(cell, poi_cell) <= 2
        ]
        if not agent_options:
            continue
        agent_cell = agent_options[int(rng.integers(len(agent_options)))]
        grid[goal] = Cell.GOAL
        return WorldState(
            grid=grid,
            agent=Pose(*agent_cell, Heading(int(rng.integers(4)))),
            poi=Pose(*poi_cell, Heading(int(rng.integers(4)))),
            goal=goal,
        )
    raise MapGenerationError(f"no solvable {size}x{size} layout for seed {seed} in {max_attempts} attempts")


def parse_ascii(
    text: str, agent_heading: Heading = Heading.NORTH, poi_heading: Heading = Heading.NORTH
) -> WorldState:
    """Inverse of :func:`render_ascii`; handy for hand-built test scenes."""
    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    grid = np.zeros((len(lines), len(lines[0])), dtype=np.int8)
    agent = poi = goal = None
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == "#":
                grid[r, c] = Cell.WALL
            elif ch == "G":
                grid[r, c] = Cell.GOAL
                goal = (r, c)
            elif ch == "A":
                agent = Pose(r, c, agent_heading)
            elif ch == "P":
                poi = Pose(r, c, poi_heading)
            elif ch != ".":
                raise ValueError(f"unknown map character {ch!r}")
    if agent is None or poi is None or goal is None:
        raise ValueError("map needs one 'A', one 'P' and one 'G'")
    return WorldState(grid, agent, poi, goal)


def render_ascii(state: WorldState) -> str:
    chars = np.array([".", "#", "G"])[state.grid]
    chars[state.agent.cell] = "A"
    chars[state.poi.cell] = "P"
    return "\n".join("".join(row) for row in chars)


# ---------------------------------------------------------------- dynamics


def poi_policy_step(state: WorldState, rng: np.random.Generator, p_pause: float = 0.2) -> Pose:
    """Advance the POI one cell along a shortest path to the goal.

    The path is recomputed every step with the agent's cell treated as an
    obstacle; if the agent cuts off every route, or a pause is drawn, the POI
    stays put. Exactly one uniform draw is consumed per call.
    """
    pause = rng.random() < p_pause
    poi = state.poi
    if pause or poi.cell == tuple(state.goal):
        return poi
    dist = bfs_distances(state.grid, tuple(state.goal), blocked=state.agent.cell)
    here = dist[poi.cell]
    if here <= 0:
        return poi
    for heading in Heading:
        dr, dc = HEADING_DELTAS[heading]
        nxt = (poi.row + int(dr), poi.col + int(dc))
        if dist[nxt] == here - 1:
            return Pose(nxt[0], nxt[1], heading)
    return poi


def is_terminal(state: WorldState, reward: RewardConfig) -> bool:
    return (
        state.poi.cell == tuple(state.goal)
        or manhattan(state.agent.cell, state.poi.cell) > reward.d_far
        or state.step_count >= reward.max_steps
    )


def step(
    state: WorldState,
    action: Action,
    config: EnvConfig,
    rng: np.random.Generator,
) -> tuple[WorldState, StepOutcome]:
    """Agent acts, then the POI moves; returns the new state and the outcome.

    ``d_near`` is a Chebyshev radius; ``d_far`` is a Manhattan radius.
    """
    rcfg = config.reward
    if is_terminal(state, rcfg):
        raise TerminalStateError("cannot step a terminal state")
    action = Action(action)
    agent = state.agent
    collision = False
    if action == Action.FORWARD:
        target = agent.ahead()
        if state.is_wall(*target) or target == state.poi.cell:
            collision = True
        else:
            agent = Pose(target[0], target[1], agent.heading)
    else:
        agent = agent.turned(action)

    moved = replace(state, agent=agent, step_count=state.step_count + 1)
    new_state = replace(moved, poi=poi_policy_step(moved, rng, config.p_pause))

    obs = render_observation(new_state, new_state.agent, config.view_size)
    poi_distance = chebyshev(new_state.agent.cell, new_state.poi.cell)
    poi_visible = obs.poi_visible
    reached = new_state.poi.cell == tuple(new_state.goal)
    reward = (
        rcfg.r_near * (poi_visible and poi_distance <= rcfg.d_near)
        + rcfg.r_collision * collision
        + rcfg.r_goal * reached
    )
    terminated = reached
    truncated = not terminated and (
        manhattan(new_state.agent.cell, new_state.poi.cell) > rcfg.d_far
        or new_state.step_count >= rcfg.max_steps
    )
    info = {"collision": collision, "poi_visible": poi_visible, "poi_distance": poi_distance}
    return new_state, StepOutcome(obs, float(reward), terminated, truncated, info)


class GridEnv:
    """Stateful wrapper with a ``reset``/``step`` loop.

    >>> env = GridEnv(EnvConfig())
    >>> obs = env.reset(seed=3)
    >>> obs.window.shape
    (5, 5)
    """

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.state: WorldState | None = None
        self.rng: np.random.Generator | None = None

    def reset(self, seed: int) -> EgoObservation:
        self.state = generate_map(seed, self.config.size)
        self.rng = np.random.default_rng([seed, 1])
        return self.observe()

    def observe(self) -> EgoObservation:
        return render_observation(self.state, self.state.agent, self.config.view_size)

    def step(self, action: Action) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, outcome = step(self.state, action, self.config, self.rng)
        return outcome

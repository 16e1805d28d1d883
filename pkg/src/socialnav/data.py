"""Experience collection, A* expert, and the on-disk episode container.

File layout (all integers little-endian)::

    magic  b"SNAVDS01"
    u32    format_version
    frames* : u8 tag, u32 length, payload
              tag b"E" -> one episode (see ``_pack_episode``)
              tag b"M" -> JSON manifest (exactly one, after all episodes)
    trailer: b"CRC!" + u32 crc32 of every byte before the trailer

Episodes are written as they are produced and can be iterated lazily with
:func:`iter_episodes`.
"""
from __future__ import annotations

import heapq
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import EnvConfig
from .env import (
    Action,
    EgoObservation,
    GridEnv,
    Heading,
    Pose,
    WorldState,
    bfs_distances,
    is_terminal,
    manhattan,
    visibility_mask,
    world_to_window,
)

MAGIC = b"SNAVDS01"
FORMAT_VERSION = 1
_TRAILER = b"CRC!"


class PolicyTag(IntEnum):
    RANDOM = 0
    EXPERT = 1


class DatasetError(Exception):
    """Base class for dataset container problems."""


class MalformedDatasetError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedDatasetError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


# ---------------------------------------------------------------- expert


def poi_in_view(state: WorldState, pose: Pose, view_size: int = 5) -> bool:
    loc = world_to_window(pose, state.poi.cell, view_size)
    return loc is not None and bool(visibility_mask(state, pose, view_size)[loc])


# (radius, POI must be in view); the last tier only gets out of the POI's way
_TARGET_TIERS = ((1, True), (2, True), (3, True), (3, False))


class _Targets:
    """Poses the expert tries to reach: within ``radius`` (Manhattan) of the
    POI, optionally with the POI in view, and not cutting the POI off from
    its goal."""

    def __init__(self, state: WorldState, view_size: int, radius: int, need_view: bool, cuts: dict):
        self.state, self.view_size = state, view_size
        self.radius, self.need_view = radius, need_view
        self._cuts = cuts
        self._memo: dict[Pose, bool] = {}

    def _is_cut(self, cell: tuple[int, int]) -> bool:
        hit = self._cuts.get(cell)
        if hit is None:
            dist = bfs_distances(self.state.grid, tuple(self.state.goal), blocked=cell)
            hit = self._cuts[cell] = bool(dist[self.state.poi.cell] < 0)
        return hit

    def __contains__(self, pose: Pose) -> bool:
        hit = self._memo.get(pose)
        if hit is None:
            poi = self.state.poi.cell
            hit = (
                0 < manhattan(pose.cell, poi) <= self.radius
                and not self._is_cut(pose.cell)
                and (not self.need_view or poi_in_view(self.state, pose, self.view_size))
            )
            self._memo[pose] = hit
        return hit


def _successor(state: WorldState, pose: Pose, action: Action) -> Pose | None:
    if action != Action.FORWARD:
        return pose.turned(action)
    nxt = pose.ahead()
    if state.is_wall(*nxt) or nxt == state.poi.cell:
        return None
    return Pose(nxt[0], nxt[1], pose.heading)


def astar_cost(state: WorldState, start: Pose, targets: _Targets) -> float:
    """A* over (cell, heading) with unit action costs; ``inf`` if unreachable."""
    poi = state.poi.cell

    def h(p: Pose) -> int:
        return max(0, manhattan(p.cell, poi) - targets.radius)

    frontier = [(h(start), 0, 0, start)]
    best = {start: 0}
    tick = 0
    while frontier:
        _, g, _, pose = heapq.heappop(frontier)
        if g > best.get(pose, g):
            continue
        if pose in targets:
            return g
        for action in Action:
            nxt = _successor(state, pose, action)
            if nxt is None:
                continue
            if g + 1 < best.get(nxt, float("inf")):
                best[nxt] = g + 1
                tick += 1
                heapq.heappush(frontier, (g + 1 + h(nxt), g + 1, tick, nxt))
    return float("inf")


def astar_expert_action(state: WorldState, view_size: int = 5) -> Action:
    """First action of a cheapest plan to a pose next to the POI with the POI
    in view.

    Turns and forward moves cost 1 each; ties go to the lower action index.
    Target poses must leave the POI a route to its goal. If none is
    reachable at distance 1 (e.g. the POI sits in a dead end behind the
    agent) the radius widens, and as a last resort the expert just clears
    the way. At a target pose it turns to face the POI and never walks into
    it.
    """
    agent = state.agent
    cuts: dict = {}
    for radius, need_view in _TARGET_TIERS:
        targets = _Targets(state, view_size, radius, need_view, cuts)
        if agent in targets:
            loc = world_to_window(agent, state.poi.cell, view_size)
            centre = view_size // 2
            if loc is None:
                return Action.TURN_LEFT
            if loc[1] < centre:
                return Action.TURN_LEFT
            if loc[1] > centre:
                return Action.TURN_RIGHT
            nxt = _successor(state, agent, Action.FORWARD)
            if nxt is not None and nxt in targets:
                return Action.FORWARD
            return Action.TURN_LEFT
        best_action, best_cost = None, float("inf")
        for action in Action:
            nxt = _successor(state, agent, action)
            if nxt is None:
                continue
            cost = 1 + astar_cost(state, nxt, targets)
            if cost < best_cost:
                best_action, best_cost = action, cost
        if best_action is not None:
            return best_action
    return Action.TURN_LEFT


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class Transition:
    obs: EgoObservation
    action: Action
    reward: float
    next_obs: EgoObservation
    terminated: bool
    truncated: bool
    global_state_snapshot: WorldState
    state: WorldState


@dataclass(eq=False)
class Episode:
    """One episode stored column-wise.

    Arrays indexed by time have ``n + 1`` rows for states/observations and
    ``n`` rows for actions/rewards/flags.
    """

    seed: int
    policy_tag: PolicyTag
    grid: np.ndarray
    goal: tuple[int, int]
    agent_poses: np.ndarray  # (n+1, 3)
    poi_poses: np.ndarray  # (n+1, 3)
    step_counts: np.ndarray  # (n+1,)
    windows: np.ndarray  # (n+1, V, V)
    poi_headings: np.ndarray  # (n+1,), -1 when the POI is not in view
    actions: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,)
    terminated: np.ndarray  # (n,)
    truncated: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        arrays = (
            "grid", "agent_poses", "poi_poses", "step_counts", "windows",
            "poi_headings", "actions", "rewards", "terminated", "truncated",
        )
        return (
            self.seed == other.seed
            and self.policy_tag == other.policy_tag
            and tuple(self.goal) == tuple(other.goal)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )

    def state_at(self, t: int) -> WorldState:
        a, p = self.agent_poses[t], self.poi_poses[t]
        return WorldState(
            self.grid,
            Pose(int(a[0]), int(a[1]), Heading(int(a[2]))),
            Pose(int(p[0]), int(p[1]), Heading(int(p[2]))),
            tuple(self.goal),
            int(self.step_counts[t]),
        )

    def observation_at(self, t: int) -> EgoObservation:
        heading = int(self.poi_headings[t])
        return EgoObservation(self.windows[t], None if heading < 0 else heading)

    @property
    def transitions(self) -> list[Transition]:
        out = []
        for t in range(len(self)):
            out.append(
                Transition(
                    obs=self.observation_at(t),
                    action=Action(int(self.actions[t])),
                    reward=float(self.rewards[t]),
                    next_obs=self.observation_at(t + 1),
                    terminated=bool(self.terminated[t]),
                    truncated=bool(self.truncated[t]),
                    global_state_snapshot=self.state_at(t + 1),
                    state=self.state_at(t),
                )
            )
        return out


@dataclass(eq=False)
class Dataset:
    episodes: list[Episode]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.manifest:
            self.manifest = build_manifest(self.episodes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.manifest == other.manifest and self.episodes == other.episodes

    @property
    def total_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def arrays(self, episodes: Iterable[int] | None = None) -> dict[str, np.ndarray]:
        """Stack (obs, action, next_obs) triples for model training."""
        eps = self.episodes if episodes is None else [self.episodes[i] for i in episodes]
        return {
            "obs": np.concatenate([ep.windows[:-1] for ep in eps]),
            "actions": np.concatenate([ep.actions for ep in eps]).astype(np.int64),
            "next_obs": np.concatenate([ep.windows[1:] for ep in eps]),
        }


def build_manifest(episodes: Iterable[Episode]) -> dict:
    counts = {tag.name.lower(): 0 for tag in PolicyTag}
    total = 0
    n = 0
    for ep in episodes:
        counts[PolicyTag(ep.policy_tag).name.lower()] += 1
        total += len(ep)
        n += 1
    return {"format_version": FORMAT_VERSION, "episodes": n, "counts": counts, "total_steps": total}


# ---------------------------------------------------------------- collection


def run_episode(
    seed: int,
    policy_tag: PolicyTag,
    config: EnvConfig,
    rng: np.random.Generator,
) -> Episode:
    env = GridEnv(config)
    obs = env.reset(seed)
    states = [env.state]
    observations = [obs]
    actions, rewards, terms, truncs = [], [], [], []
    while not is_terminal(env.state, config.reward):
        if policy_tag == PolicyTag.RANDOM:
            action = Action(int(rng.integers(len(Action))))
        else:
            action = astar_expert_action(env.state, config.view_size)
        out = env.step(action)
        states.append(env.state)
        observations.append(out.observation)
        actions.append(int(action))
        rewards.append(out.reward)
        terms.append(out.terminated)
        truncs.append(out.truncated)
        if out.terminated or out.truncated:
            break
    first = states[0]
    return Episode(
        seed=seed,
        policy_tag=PolicyTag(policy_tag),
        grid=np.array(first.grid, dtype=np.int8),
        goal=tuple(int(x) for x in first.goal),
        agent_poses=np.array([(s.agent.row, s.agent.col, s.agent.heading) for s in states], dtype=np.int16),
        poi_poses=np.array([(s.poi.row, s.poi.col, s.poi.heading) for s in states], dtype=np.int16),
        step_counts=np.array([s.step_count for s in states], dtype=np.int32),
        windows=np.stack([o.window for o in observations]).astype(np.int8),
        poi_headings=np.array([-1 if o.poi_heading is None else o.poi_heading for o in observations], dtype=np.int8),
        actions=np.array(actions, dtype=np.int8),
        rewards=np.array(rewards, dtype=np.float64),
        terminated=np.array(terms, dtype=bool),
        truncated=np.array(truncs, dtype=bool),
    )


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def n_random_episodes(n: int, mix: float) -> int:
    return int(np.floor(mix * n + 0.5))


def collect_episodes(
    n: int, mix: float = 0.5, seed: int = 0, config: EnvConfig | None = None
) -> Dataset:
    """Roll out ``n`` episodes on fresh maps; the first ``round(mix * n)``
    use uniform-random actions, the rest the A* expert."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    config = config or EnvConfig()
    n_random = n_random_episodes(n, mix)
    episodes = []
    for i in range(n):
        tag = PolicyTag.RANDOM if i < n_random else PolicyTag.EXPERT
        rng = np.random.default_rng([seed, i, 2])
        episodes.append(run_episode(episode_seed(seed, i), tag, config, rng))
    return Dataset(episodes)


# ---------------------------------------------------------------- serialization

_EP_HEAD = struct.Struct("<qBHHHHBI")  # seed, tag, h, w, goal_r, goal_c, view, n


def _pack_episode(ep: Episode) -> bytes:
    n = len(ep)
    h, w = ep.grid.shape
    v = ep.windows.shape[1]
    buf = io.BytesIO()
    buf.write(_EP_HEAD.pack(ep.seed, int(ep.policy_tag), h, w, ep.goal[0], ep.goal[1], v, n))
    for arr, dtype in (
        (ep.grid, "<i1"),
        (ep.agent_poses, "<i2"),
        (ep.poi_poses, "<i2"),
        (ep.step_counts, "<i4"),
        (ep.windows, "<i1"),
        (ep.poi_headings, "<i1"),
        (ep.actions, "<i1"),
        (ep.rewards, "<f8"),
        (ep.terminated, "<u1"),
        (ep.truncated, "<u1"),
    ):
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def _unpack_episode(payload: bytes) -> Episode:
    try:
        seed, tag, h, w, gr, gc, v, n = _EP_HEAD.unpack_from(payload, 0)
    except struct.error as exc:
        raise MalformedDatasetError("episode header too short") from exc
    offset = _EP_HEAD.size
    layout = [
        ("grid", "<i1", (h, w)),
        ("agent_poses", "<i2", (n + 1, 3)),
        ("poi_poses", "<i2", (n + 1, 3)),
        ("step_counts", "<i4", (n + 1,)),
        ("windows", "<i1", (n + 1, v, v)),
        ("poi_headings", "<i1", (n + 1,)),
        ("actions", "<i1", (n,)),
        ("rewards", "<f8", (n,)),
        ("terminated", "<u1", (n,)),
        ("truncated", "<u1", (n,)),
    ]
    fields_ = {}
    for name, dtype, shape in layout:
        count = int(np.prod(shape))
        size = count * np.dtype(dtype).itemsize
        if offset + size > len(payload):
            raise MalformedDatasetError(f"episode payload short while reading {name}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        fields_[name] = arr.astype(arr.dtype.newbyteorder("="))
        offset += size
    if offset != len(payload):
        raise MalformedDatasetError("trailing bytes in episode payload")
    fields_["terminated"] = fields_["terminated"].astype(bool)
    fields_["truncated"] = fields_["truncated"].astype(bool)
    return Episode(seed=seed, policy_tag=PolicyTag(tag), goal=(gr, gc), **fields_)


def _frame(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<I", len(payload)) + payload


class DatasetWriter:
    """Streaming writer: episodes go to disk as they arrive."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "wb")
        self._crc = 0
        self._episodes = 0
        self._counts = {tag.name.lower(): 0 for tag in PolicyTag}
        self._steps = 0
        self._write(MAGIC + struct.pack("<I", FORMAT_VERSION))

    def _write(self, data: bytes) -> None:
        self._crc = zlib.crc32(data, self._crc)
        self._fh.write(data)

    def write(self, ep: Episode) -> None:
        self._write(_frame(b"E", _pack_episode(ep)))
        self._episodes += 1
        self._counts[PolicyTag(ep.policy_tag).name.lower()] += 1
        self._steps += len(ep)

    def close(self) -> dict:
        manifest = {
            "format_version": FORMAT_VERSION,
            "episodes": self._episodes,
            "counts": self._counts,
            "total_steps": self._steps,
        }
        self._write(_frame(b"M", json.dumps(manifest, sort_keys=True).encode()))
        self._fh.write(_TRAILER + struct.pack("<I", self._crc))
        self._fh.close()
        return manifest

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if exc[0] is None:
            self.close()
        else:
            self._fh.close()


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with DatasetWriter(path) as writer:
        for ep in dataset.episodes:
            writer.write(ep)


def _read_frames(data: bytes) -> Iterator[tuple[bytes, bytes]]:
    if len(data) == 0:
        raise MalformedDatasetError("empty file")
    if len(data) < len(MAGIC) + 4:
        raise TruncatedDatasetError("file shorter than header")
    if data[: len(MAGIC)] != MAGIC:
        raise MalformedDatasetError("bad magic bytes; not a dataset file")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"file format_version {version}, reader supports {FORMAT_VERSION}")
    if len(data) < len(MAGIC) + 4 + 8 or data[-8:-4] != _TRAILER:
        raise TruncatedDatasetError("missing checksum trailer")
    body = data[:-8]
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored:
        raise ChecksumError(f"crc32 mismatch: stored {stored:#010x}, computed {zlib.crc32(body):#010x}")
    offset = len(MAGIC) + 4
    while offset < len(body):
        if offset + 5 > len(body):
            raise TruncatedDatasetError("frame header cut short")
        tag = body[offset : offset + 1]
        (length,) = struct.unpack_from("<I", body, offset + 1)
        offset += 5
        if offset + length > len(body):
            raise TruncatedDatasetError("frame payload cut short")
        yield tag, body[offset : offset + length]
        offset += length


def iter_episodes(path: str | Path) -> Iterator[Episode]:
    data = Path(path).read_bytes()
    for tag, payload in _read_frames(data):
        if tag == b"E":
            yield _unpack_episode(payload)


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset file.

    Raises a distinct :class:`DatasetError` subclass for an empty or foreign
    file, a version mismatch, truncation and a checksum failure. The manifest
    is checked against a recount of the loaded episodes.
    """
    data = Path(path).read_bytes()
    episodes, manifest = [], None
    for tag, payload in _read_frames(data):
        if tag == b"E":
            if manifest is not None:
                raise MalformedDatasetError("episode frame after manifest")
            episodes.append(_unpack_episode(payload))
        elif tag == b"M":
            manifest = json.loads(payload.decode())
        else:
            raise MalformedDatasetError(f"unknown frame tag {tag!r}")
    if manifest is None:
        raise MalformedDatasetError("no manifest frame")
    if manifest != build_manifest(episodes):
        raise MalformedDatasetError("manifest does not match file contents")
    return Dataset(episodes, manifest)

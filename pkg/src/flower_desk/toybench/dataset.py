"""Expert dataset generation and the FTOY binary container."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..action_spaces import NormalizationStats
from ..context import PromptSpec
from ..errors import ConfigError, FormatError, IntegrityError, RolloutError
from ..numerics import SeededRng
from .experts import classify_crossing, expert_action, hold_action
from .world import EMBODIMENTS, GOALS, MODES, TASKS, ToyWorld, embodiment, mirror_point, sample_starts

MAGIC = b"FTOY"
VERSION = 1
_STREAM_DATA = 101


@dataclass
class Episode:
    embodiment: str  # key: A, B or C
    goal: str
    mode: str
    prompt: PromptSpec
    grids: np.ndarray  # T x G x G x C
    actions: np.ndarray  # T x d_a
    positions: np.ndarray  # (T + 1) x 2
    proprio: np.ndarray | None = None  # T x p

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    def chunk(self, t: int, horizon: int) -> np.ndarray:
        """Actions t..t+H-1, padded past the end with the hold action."""
        emb = embodiment(self.embodiment)
        out = np.empty((horizon, self.actions.shape[1]), dtype=np.float32)
        take = min(horizon, self.length - t)
        out[:take] = self.actions[t:t + take]
        out[take:] = hold_action(emb)
        return out


@dataclass
class EmbodimentArrays:
    """Flattened per-step training view of one embodiment's episodes."""

    key: str
    prompts: list  # per step rendered prompt text
    grids: np.ndarray  # N x G x G x C
    chunks: np.ndarray  # N x H x d_a, raw units
    proprio: np.ndarray | None
    goals: np.ndarray  # N, strings
    modes: np.ndarray  # N, strings

    def __len__(self) -> int:
        return self.grids.shape[0]


@dataclass
class ToyDataset:
    seed: int
    episodes_per_embodiment: int
    episodes: list[Episode]
    stats: dict[str, NormalizationStats]
    keys: tuple[str, ...] = ("A", "B", "C")
    _arrays: dict = field(default_factory=dict, repr=False)

    def by_embodiment(self, key: str) -> list[Episode]:
        key = embodiment(key).key
        return [e for e in self.episodes if e.embodiment == key]

    def arrays(self, key: str) -> EmbodimentArrays:
        key = embodiment(key).key
        if key not in self._arrays:
            self._arrays[key] = _flatten(self.by_embodiment(key), key)
        return self._arrays[key]

    def manifest(self) -> dict:
        counts = {k: len(self.by_embodiment(k)) for k in self.keys}
        return {
            "format": "FTOY",
            "version": VERSION,
            "seed": self.seed,
            "episodes_per_embodiment": self.episodes_per_embodiment,
            "embodiments": [
                {"key": k, "descriptor": EMBODIMENTS[k].descriptor.to_dict(),
                 "stats": self.stats[k].to_dict(), "episodes": counts[k]}
                for k in self.keys
            ],
            "counts": counts,
            "total_episodes": len(self.episodes),
        }


def _flatten(episodes: list[Episode], key: str) -> EmbodimentArrays:
    emb = EMBODIMENTS[key]
    h = emb.descriptor.chunk_len
    prompts, grids, chunks, proprio, goals, modes = [], [], [], [], [], []
    for ep in episodes:
        text = ep.prompt.render()
        for t in range(ep.length):
            chunks.append(ep.chunk(t, h))
        prompts.extend([text] * ep.length)
        grids.append(ep.grids)
        if ep.proprio is not None:
            proprio.append(ep.proprio)
        goals.extend([ep.goal] * ep.length)
        modes.extend([ep.mode] * ep.length)
    return EmbodimentArrays(
        key, prompts, np.concatenate(grids), np.stack(chunks),
        np.concatenate(proprio).astype(np.float32) if proprio else None,
        np.array(goals), np.array(modes),
    )


# ----------------------------------------------------------------------------
# generation


def run_expert(key: str, starts: np.ndarray, goals, modes) -> list[Episode]:
    """Roll the scripted expert from each start; raises if any episode fails."""
    emb = embodiment(key)
    n = len(goals)
    world = ToyWorld(emb, n)
    world.reset(starts)
    done = np.zeros(n, dtype=bool)
    length = np.zeros(n, dtype=np.int64)
    grids, acts, pos, prop = [], [], [world.position()], []
    for _ in range(emb.max_steps):
        grids.append(world.observe())
        if emb.descriptor.uses_proprio:
            prop.append(world.proprio())
        a = expert_action(world, goals, modes)
        acts.append(a)
        world.step(a, ~done)
        pos.append(world.position())
        length += ~done
        done |= world.at_goal(list(goals))
        if done.all():
            break
    bad = np.flatnonzero(~done | world.collided)
    if bad.size:
        i = int(bad[0])
        raise RolloutError(f"expert failed on embodiment {key}: episode {i}, goal {goals[i]}, "
                           f"mode {modes[i]}, start {starts[i].tolist()}, collided={bool(world.collided[i])}")
    grids, acts, pos = np.stack(grids, 1), np.stack(acts, 1), np.stack(pos, 1)
    prop = np.stack(prop, 1) if prop else None
    out = []
    for i in range(n):
        t = int(length[i])
        out.append(Episode(
            key, goals[i], modes[i], emb.prompt(goals[i]),
            grids[i, :t].astype(np.float32), acts[i, :t].astype(np.float32),
            pos[i, :t + 1].astype(np.float32),
            None if prop is None else prop[i, :t].astype(np.float32),
        ))
    return out


def _balanced(rng, n: int) -> np.ndarray:
    """Shuffled 0/1 labels with an exact half split (odd n: last label is a coin flip)."""
    labels = np.concatenate([np.zeros(n // 2, dtype=np.int64), np.ones(n // 2, dtype=np.int64),
                             rng.integers(0, 2, n % 2)])
    return rng.permutation(labels)


def compute_stats(episodes: list[Episode], key: str) -> NormalizationStats:
    emb = EMBODIMENTS[key]
    rows = [e.actions for e in episodes] + [hold_action(emb)[None].astype(np.float32)]
    return NormalizationStats.from_data(np.concatenate(rows))


def generate_dataset(seed: int, episodes_per_embodiment: int, keys=("A", "B", "C")) -> ToyDataset:
    if episodes_per_embodiment < 1:
        raise ConfigError(f"episodes per embodiment must be positive, got {episodes_per_embodiment}")
    episodes, stats = [], {}
    for j, key in enumerate(keys):
        key = embodiment(key).key
        rng = SeededRng(seed, _STREAM_DATA + j).generator
        n = episodes_per_embodiment
        starts = sample_starts(rng, n)
        goals = [("red", "blue")[g] for g in _balanced(rng, n)]
        modes = [MODES[m] for m in _balanced(rng, n)]
        eps = run_expert(key, starts, goals, modes)
        stats[key] = compute_stats(eps, key)
        episodes.extend(eps)
    return ToyDataset(seed, episodes_per_embodiment, episodes, stats, tuple(embodiment(k).key for k in keys))


def single_datapoint_dataset(key: str = "A", goal: str = "red", mode: str = "over") -> ToyDataset:
    """One episode truncated to its first step: the degenerate overfitting case."""
    start = np.array([[0.11, 0.5]])
    ep = run_expert(key, start, [goal], [mode])[0]
    ep = Episode(ep.embodiment, goal, mode, ep.prompt, ep.grids[:1], ep.actions[:1],
                 ep.positions[:2], None if ep.proprio is None else ep.proprio[:1])
    stats = compute_stats([ep], key)
    return ToyDataset(0, 1, [ep], {key: stats}, (key,))


def mirror_episode_start(start, goal, mode):
    """Mirror map of the task: y -> 1 - y swaps red/blue and over/under."""
    return mirror_point(start), {"red": "blue", "blue": "red"}[goal], {"over": "under", "under": "over"}[mode]


# ----------------------------------------------------------------------------
# FTOY container


def _arr_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _encode_episode(ep: Episode) -> bytes:
    head = {
        "embodiment": ep.embodiment, "goal": ep.goal, "mode": ep.mode,
        "prompt": {"robot_type": ep.prompt.robot_type, "action_space": ep.prompt.action_space_name,
                   "task": ep.prompt.task, "text": ep.prompt.render()},
        "grids": list(ep.grids.shape), "actions": list(ep.actions.shape),
        "positions": list(ep.positions.shape),
        "proprio": None if ep.proprio is None else list(ep.proprio.shape),
    }
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(hb)), hb, _arr_bytes(ep.grids), _arr_bytes(ep.actions),
             _arr_bytes(ep.positions)]
    if ep.proprio is not None:
        parts.append(_arr_bytes(ep.proprio))
    return b"".join(parts)


def _decode_episode(buf: bytes) -> Episode:
    (hl,) = struct.unpack_from("<I", buf, 0)
    head = json.loads(buf[4:4 + hl].decode("utf-8"))
    off = 4 + hl

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        return a

    grids = take(head["grids"])
    actions = take(head["actions"])
    positions = take(head["positions"])
    proprio = take(head["proprio"]) if head["proprio"] is not None else None
    if off != len(buf):
        raise IntegrityError("episode record length does not match its header")
    p = head["prompt"]
    return Episode(head["embodiment"], head["goal"], head["mode"],
                   PromptSpec(p["robot_type"], p["action_space"], p["task"]),
                   grids, actions, positions, proprio)


def save_dataset(ds: ToyDataset, path) -> Path:
    path = Path(path)
    man = json.dumps(ds.manifest(), sort_keys=True, indent=1).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(man)))
        fh.write(man)
        fh.write(struct.pack("<Q", len(ds.episodes)))
        for ep in ds.episodes:
            rec = _encode_episode(ep)
            fh.write(struct.pack("<Q", len(rec)))
            fh.write(rec)
    return path


def load_dataset(path) -> ToyDataset:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an FTOY file")
    if len(data) < 16:
        raise IntegrityError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported FTOY version {version}")
    (ml,) = struct.unpack_from("<Q", data, 8)
    off = 16 + ml
    if off + 8 > len(data):
        raise IntegrityError(f"{path}: truncated manifest")
    man = json.loads(data[16:off].decode("utf-8"))
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    episodes = []
    for i in range(n):
        if off + 8 > len(data):
            raise IntegrityError(f"{path}: truncated before episode {i}")
        (rl,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + rl > len(data):
            raise IntegrityError(f"{path}: episode {i} is truncated")
        episodes.append(_decode_episode(data[off:off + rl]))
        off += rl
    if off != len(data):
        raise IntegrityError(f"{path}: trailing bytes after the last episode")
    keys = tuple(e["key"] for e in man["embodiments"])
    stats = {e["key"]: NormalizationStats.from_dict(e["stats"]) for e in man["embodiments"]}
    return ToyDataset(man["seed"], man["episodes_per_embodiment"], episodes, stats, keys)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != MAGIC:
            raise FormatError(f"{path}: not an FTOY file")
        (ml,) = struct.unpack_from("<Q", head, 8)
        return json.loads(fh.read(ml).decode("utf-8"))

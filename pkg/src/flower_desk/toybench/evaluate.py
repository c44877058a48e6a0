"""Policies, batched rollouts, mode coverage and instruction chains."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..context import tokenize_batch
from ..errors import ConfigError, ContractError, RolloutError
from ..numerics import SeededRng
from ..rectified_flow import FlowSchedule, euler_sample, predict_l1
from .experts import classify_crossing, expert_chunk
from .world import GOALS, MODES, ToyWorld, embodiment, sample_starts

START_CENTER = np.array([0.11, 0.5])


@dataclass
class Observation:
    """What a policy sees for the environments it must plan for."""

    world: ToyWorld
    index: np.ndarray  # environment indices being planned
    goals: list
    grids: np.ndarray
    proprio: np.ndarray | None


class Policy:
    """Maps observations to raw-unit action chunks of shape n x H x d_a."""

    def plan(self, obs: Observation, rng: SeededRng) -> np.ndarray:
        raise NotImplementedError


class ExpertPolicy(Policy):
    """The scripted expert; modes are fixed per environment or drawn per plan."""

    def __init__(self, modes=None):
        self.modes = modes
        self._drawn: dict[int, str] = {}

    def reset(self):
        self._drawn.clear()

    def plan(self, obs, rng):
        h = obs.world.emb.descriptor.chunk_len
        modes = []
        for i in obs.index:
            if self.modes is not None:
                modes.append(self.modes[i] if not isinstance(self.modes, str) else self.modes)
            else:
                if int(i) not in self._drawn:
                    self._drawn[int(i)] = MODES[int(rng.integers(0, 2))]
                modes.append(self._drawn[int(i)])
        shadow = ToyWorld(obs.world.emb, len(obs.index))
        shadow.state = obs.world.state[obs.index].copy()
        return expert_chunk(shadow, obs.goals, modes, h)


class ZeroPolicy(Policy):
    def plan(self, obs, rng):
        d = obs.world.emb.descriptor
        return np.zeros((len(obs.index), d.chunk_len, d.action_dim))


class ModelPolicy(Policy):
    """Flow (Euler sampling) or L1 (deterministic) head of a trained FlowModel."""

    def __init__(self, model, head: str = "flow", steps: int | None = None, time_dist="logit_normal"):
        if head not in ("flow", "l1_regression"):
            raise ConfigError(f"unknown head kind {head!r}")
        self.model = model
        self.head = head
        self.steps = steps
        self.time_dist = time_dist

    def plan(self, obs, rng):
        emb = obs.world.emb
        desc = self.model.registry.resolve(emb.name)
        prompts = [emb.prompt(g) for g in obs.goals]
        seq = tokenize_batch(prompts, obs.grids, self.model.enc_cfg)
        was_training = self.model.training
        self.model.eval()
        try:
            from .. import numerics as F
            with F.no_grad():
                bundle = self.model.context(seq, desc.name, obs.proprio)
                if self.head == "flow":
                    sched = FlowSchedule.for_descriptor(desc, self.steps, self.time_dist)
                    z = euler_sample(self.model, bundle, desc.name, sched, rng)
                else:
                    z = predict_l1(self.model, bundle, desc.name)
        finally:
            self.model.train(was_training)
        stats = self.model.registry.stats(desc.name)
        return stats.denormalize(np.clip(z, -1.0, 1.0))


@dataclass
class RolloutResult:
    paths: np.ndarray  # n x (T + 1) x 2, padded with the final position
    success: np.ndarray
    reached: list  # goal name reached first, or None
    collided: np.ndarray
    steps: np.ndarray
    clip_events: np.ndarray

    @property
    def modes(self) -> list[str]:
        return [classify_crossing(p, bool(c)) for p, c in zip(self.paths, self.collided)]


def rollout(policy: Policy, world: ToyWorld, goals, rng: SeededRng, starts=None,
            multistep: int | None = None) -> RolloutResult:
    """Run ``world.n`` episodes in lock-step, executing M actions per plan."""
    n = world.n
    goals = [goals] * n if isinstance(goals, str) else list(goals)
    if len(goals) != n:
        raise ContractError("one goal per environment is required")
    emb = world.emb
    m = multistep or emb.multistep
    if not 1 <= m <= emb.descriptor.chunk_len:
        raise ConfigError(f"multistep {m} must lie in [1, {emb.descriptor.chunk_len}]")
    world.reset(np.tile(START_CENTER, (n, 1)) if starts is None else starts)
    active = np.ones(n, dtype=bool)
    reached: list = [None] * n
    paths = [world.position()]
    goal_names = list(GOALS)
    while active.any() and world.step_count.max() < emb.max_steps:
        idx = np.flatnonzero(active)
        grids = world.observe()[idx]
        prop = world.proprio()
        obs = Observation(world, idx, [goals[i] for i in idx], grids, None if prop is None else prop[idx])
        chunk = np.asarray(policy.plan(obs, rng), dtype=np.float64)
        if not np.all(np.isfinite(chunk)):
            raise RolloutError(f"policy produced non-finite actions at step {int(world.step_count.max())}")
        full = np.zeros((n, chunk.shape[1], chunk.shape[2]))
        full[idx] = chunk
        for j in range(m):
            if not active.any() or world.step_count.max() >= emb.max_steps:
                break
            world.step(full[:, j], active)
            paths.append(world.position())
            for g in goal_names:
                hit = active & world.at_goal(g)
                for i in np.flatnonzero(hit):
                    reached[i] = g
                active &= ~hit
            active &= ~world.collided
    paths = np.stack(paths, axis=1)
    success = np.array([reached[i] == goals[i] and not world.collided[i] for i in range(n)])
    return RolloutResult(paths, success, reached, world.collided.copy(), world.step_count.copy(),
                         world.clip_events.copy())


def mode_coverage(policy: Policy, world_or_key, goal: str, n_samples: int, rng: SeededRng,
                  start=None) -> dict[str, int]:
    """Histogram of homotopy sides over ``n_samples`` rollouts from one start state."""
    if n_samples < 50:
        raise ConfigError("mode coverage needs at least 50 samples")
    emb = world_or_key.emb if isinstance(world_or_key, ToyWorld) else embodiment(world_or_key)
    world = ToyWorld(emb, n_samples)
    start = START_CENTER if start is None else np.asarray(start)
    res = rollout(policy, world, goal, rng, starts=np.tile(start, (n_samples, 1)))
    hist = {"over": 0, "under": 0, "collision": 0, "none": 0}
    for mlabel in res.modes:
        hist[mlabel] += 1
    return hist


def collapse_signature(hist: dict[str, int]) -> bool:
    n = sum(hist.values())
    return min(hist["over"], hist["under"]) / n < 0.05 or hist["collision"] / n > 0.30


def both_modes_covered(hist: dict[str, int], frac: float = 0.20) -> bool:
    n = sum(hist.values())
    return hist["over"] / n >= frac and hist["under"] / n >= frac


class BernoulliPolicy:
    """Synthetic task-level policy: each instruction succeeds independently with p."""

    def __init__(self, p: float):
        self.p = p

    def attempt(self, goals, rng: SeededRng) -> np.ndarray:
        return rng.random(len(goals)) < self.p


def instruction_chain_eval(policy, chain_length: int, n_chains: int, rng: SeededRng,
                           key: str = "A") -> float:
    """Mean number of consecutive instructions completed before the first failure."""
    if chain_length < 1 or n_chains < 1:
        raise ConfigError("chain length and chain count must be positive")
    chains = np.array([["red", "blue"][i] for i in rng.integers(0, 2, n_chains * chain_length)])
    chains = chains.reshape(n_chains, chain_length)
    alive = np.ones(n_chains, dtype=bool)
    done = np.zeros(n_chains, dtype=np.int64)
    emb = embodiment(key)
    for k in range(chain_length):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        goals = list(chains[idx, k])
        if hasattr(policy, "attempt"):
            ok = np.asarray(policy.attempt(goals, rng), dtype=bool)
        else:
            world = ToyWorld(emb, idx.size)
            ok = rollout(policy, world, goals, rng, starts=sample_starts(rng.generator, idx.size)).success
        done[idx[ok]] += 1
        alive[idx[~ok]] = False
    return float(done.mean())


def expected_chain_length(p: float, chain_length: int) -> float:
    return float(sum(p ** k for k in range(1, chain_length + 1)))


@dataclass
class EvalReport:
    success: dict = field(default_factory=dict)  # key -> rate
    instruction_accuracy: dict = field(default_factory=dict)  # key -> {red, blue, overall}
    mode_histogram: dict = field(default_factory=dict)
    chain_length: float | None = None
    n_rollouts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        row = {}
        for k, v in self.success.items():
            row[f"success_{k}"] = v
        for k, acc in self.instruction_accuracy.items():
            row[f"accuracy_{k}"] = acc["overall"]
        for k, v in self.mode_histogram.items():
            row[f"mode_{k}"] = v
        if self.chain_length is not None:
            row["chain_length"] = self.chain_length
        return row


def evaluate_embodiment(policy: Policy, key: str, n: int, rng: SeededRng) -> tuple[float, dict]:
    """Success rate and instruction accuracy over n random-start rollouts.

    Accuracy counts rollouts that reached the instructed goal among those that
    reached either goal.
    """
    emb = embodiment(key)
    goals = ["red", "blue"] * (n // 2) + ["red"] * (n % 2)
    world = ToyWorld(emb, n)
    res = rollout(policy, world, goals, rng, starts=sample_starts(rng.generator, n))
    acc = {}
    for g in ("red", "blue"):
        sel = [i for i in range(n) if goals[i] == g and res.reached[i] is not None]
        acc[g] = float(np.mean([res.reached[i] == g for i in sel])) if sel else 0.0
    sel = [i for i in range(n) if res.reached[i] is not None]
    acc["overall"] = float(np.mean([res.reached[i] == goals[i] for i in sel])) if sel else 0.0
    return float(res.success.mean()), acc


def evaluate(policy: Policy, keys=("A", "B", "C"), n: int = 100, seed: int = 0,
             coverage_samples: int = 0, chain_length: int = 0, n_chains: int = 0) -> EvalReport:
    rep = EvalReport()
    rng = SeededRng(seed, 301)
    for key in keys:
        s, acc = evaluate_embodiment(policy, key, n, rng)
        rep.success[key] = s
        rep.instruction_accuracy[key] = acc
        rep.n_rollouts[key] = n
    if coverage_samples:
        rep.mode_histogram = mode_coverage(policy, keys[0], "red", coverage_samples, rng)
    if chain_length and n_chains:
        rep.chain_length = instruction_chain_eval(policy, chain_length, n_chains, rng, keys[0])
    return rep

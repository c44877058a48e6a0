"""A 2-D arena with a central obstacle, two goal sites and three embodiments.

Every world object is batched: ``n`` independent environments advance in
lock-step. A single environment is simply ``n == 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..action_spaces import ActionSpaceDescriptor
from ..context import PromptSpec

OBSTACLE_CENTER = np.array([0.5, 0.5])
OBSTACLE_RADIUS = 0.12
GOALS = {"red": np.array([0.88, 0.64]), "blue": np.array([0.88, 0.36])}
GOAL_RADIUS = 0.06
START_LOW = np.array([0.08, 0.42])
START_HIGH = np.array([0.14, 0.58])
DETOUR_OFFSET = 0.25  # waypoint distance above/below the obstacle centre
STEP_SIZE = 0.03  # expert travel per step in the arena
GRID_SIZE = 16
CHANNELS = 4  # agent, red goal, blue goal, obstacle
TASKS = {"red": "go to red", "blue": "go to blue"}
MODES = ("over", "under")


@dataclass(frozen=True)
class EmbodimentDef:
    key: str
    descriptor: ActionSpaceDescriptor
    max_steps: int
    multistep: int

    @property
    def name(self) -> str:
        return self.descriptor.name

    def prompt(self, goal: str) -> PromptSpec:
        return PromptSpec(self.descriptor.robot_type, self.descriptor.name, TASKS[goal])


EMBODIMENTS = {
    "A": EmbodimentDef("A", ActionSpaceDescriptor(0, "delta_eef_2d", 3, 10, "delta_eef",
                                                  robot_type="point", frequency_hz=10.0), 60, 5),
    "B": EmbodimentDef("B", ActionSpaceDescriptor(1, "joint_3link", 4, 20, "joint",
                                                  robot_type="arm3", frequency_hz=20.0), 60, 10),
    "C": EmbodimentDef("C", ActionSpaceDescriptor(2, "bimanual_2x2", 6, 20, "bimanual_joint", True, 4,
                                                  robot_type="biarm", frequency_hz=50.0), 60, 10),
}


def embodiment(key) -> EmbodimentDef:
    if isinstance(key, EmbodimentDef):
        return key
    for emb in EMBODIMENTS.values():
        if key in (emb.key, emb.name, emb.descriptor.id):
            return emb
    raise KeyError(f"unknown embodiment {key!r}")


# ----------------------------------------------------------------------------
# kinematics

ARM3_BASE = np.array([-0.35, 0.5])
ARM3_LINKS = (0.6, 0.6, 0.15)
BI_BASES = (np.array([-0.1, 0.53]), np.array([-0.1, 0.47]))
BI_LINKS = (0.55, 0.55)
BI_GRIP_OFFSET = 0.03
MAX_EEF_STEP = 0.05
MAX_JOINT_STEP = 0.2


def two_link_ik(target, base, l1, l2, elbow_sign):
    d = target - base
    r2 = np.sum(d * d, axis=-1)
    c2 = np.clip((r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
    q2 = elbow_sign * np.arccos(c2)
    q1 = np.arctan2(d[..., 1], d[..., 0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return np.stack([q1, q2], axis=-1)


def two_link_fk(q, base, l1, l2):
    a1 = q[..., 0]
    a2 = a1 + q[..., 1]
    elbow = base + np.stack([l1 * np.cos(a1), l1 * np.sin(a1)], axis=-1)
    tip = elbow + np.stack([l2 * np.cos(a2), l2 * np.sin(a2)], axis=-1)
    return elbow, tip


def arm3_fk(q):
    l1, l2, l3 = ARM3_LINKS
    elbow, wrist = two_link_fk(q[..., :2], ARM3_BASE, l1, l2)
    a3 = q[..., 0] + q[..., 1] + q[..., 2]
    tip = wrist + np.stack([l3 * np.cos(a3), l3 * np.sin(a3)], axis=-1)
    return elbow, wrist, tip


def arm3_ik(target):
    """Canonical solution: last link points along +x, elbow on the positive side."""
    l1, l2, l3 = ARM3_LINKS
    wrist = target - np.array([l3, 0.0])
    q12 = two_link_ik(wrist, ARM3_BASE, l1, l2, 1.0)
    q3 = -(q12[..., 0] + q12[..., 1])
    return np.concatenate([q12, q3[..., None]], axis=-1)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def biarm_ik(obj):
    up = obj + np.array([0.0, BI_GRIP_OFFSET])
    lo = obj - np.array([0.0, BI_GRIP_OFFSET])
    qa = two_link_ik(up, BI_BASES[0], *BI_LINKS, 1.0)
    qb = two_link_ik(lo, BI_BASES[1], *BI_LINKS, -1.0)
    return np.concatenate([qa, qb], axis=-1)


def biarm_fk(q):
    ea, ta = two_link_fk(q[..., 0:2], BI_BASES[0], *BI_LINKS)
    eb, tb = two_link_fk(q[..., 2:4], BI_BASES[1], *BI_LINKS)
    return ea, ta, eb, tb


# ----------------------------------------------------------------------------
# rendering


_CELL = (np.arange(GRID_SIZE) + 0.5) / GRID_SIZE


def _blobs(points, weights, sigma=1.0 / GRID_SIZE):
    """Sum of isotropic Gaussians; points N x K x 2 -> N x G x G."""
    dx = _CELL[None, None, None, :] - points[..., 0][..., None, None]
    dy = _CELL[None, None, :, None] - points[..., 1][..., None, None]
    g = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) * weights[None, :, None, None]
    return g.sum(axis=1)


def _static_channels():
    red = _blobs(GOALS["red"][None, None], np.ones(1))[0]
    blue = _blobs(GOALS["blue"][None, None], np.ones(1))[0]
    yy, xx = np.meshgrid(_CELL, _CELL, indexing="ij")
    dist = np.hypot(xx - OBSTACLE_CENTER[0], yy - OBSTACLE_CENTER[1])
    obst = np.clip((OBSTACLE_RADIUS + 0.5 / GRID_SIZE - dist) * GRID_SIZE, 0.0, 1.0)
    return np.stack([red, blue, obst], axis=-1)


_STATIC = _static_channels()


class ToyWorld:
    """Batched arena dynamics for one embodiment.

    State is the joint vector (or EEF position for the point agent) plus
    gripper; positions are clipped to the unit square and clip events counted.
    """

    def __init__(self, emb, n: int = 1):
        self.emb = embodiment(emb)
        self.n = n
        self.step_count = np.zeros(n, dtype=np.int64)
        self.collided = np.zeros(n, dtype=bool)
        self.clip_events = np.zeros(n, dtype=np.int64)
        self.grip = -np.ones(n)
        self.state = None

    # -- state --------------------------------------------------------------
    def reset(self, starts: np.ndarray) -> None:
        starts = np.asarray(starts, dtype=np.float64).reshape(self.n, 2)
        k = self.emb.key
        if k == "A":
            self.state = starts.copy()
        elif k == "B":
            self.state = arm3_ik(starts)
        else:
            self.state = biarm_ik(starts)
        self.step_count[:] = 0
        self.collided[:] = False
        self.clip_events[:] = 0
        self.grip[:] = -1.0

    def position(self) -> np.ndarray:
        """The controlled point: EEF for A/B, held object (EEF midpoint) for C."""
        k = self.emb.key
        if k == "A":
            return self.state.copy()
        if k == "B":
            return arm3_fk(self.state)[2]
        _, ta, _, tb = biarm_fk(self.state)
        return 0.5 * (ta + tb)

    def proprio(self) -> np.ndarray | None:
        return self.state.copy() if self.emb.descriptor.uses_proprio else None

    def keypoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Rendered agent points and their intensities."""
        k = self.emb.key
        if k == "A":
            return self.state[:, None, :], np.ones(1)
        if k == "B":
            elbow, wrist, tip = arm3_fk(self.state)
            return np.stack([tip, elbow, wrist], axis=1), np.array([1.0, 0.5, 0.5])
        ea, ta, eb, tb = biarm_fk(self.state)
        return np.stack([0.5 * (ta + tb), ea, eb], axis=1), np.array([1.0, 0.5, 0.5])

    def observe(self) -> np.ndarray:
        pts, w = self.keypoints()
        agent = _blobs(pts, w)
        static = np.broadcast_to(_STATIC, (self.n,) + _STATIC.shape)
        return np.concatenate([agent[..., None], static], axis=-1).astype(np.float32)

    # -- dynamics -----------------------------------------------------------
    def step(self, actions: np.ndarray, active: np.ndarray | None = None) -> None:
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n, -1)
        if actions.shape[1] != self.emb.descriptor.action_dim:
            raise ValueError(f"expected {self.emb.descriptor.action_dim}-dim actions")
        active = np.ones(self.n, dtype=bool) if active is None else active
        k = self.emb.key
        new = self.state.copy()
        if k == "A":
            new += np.clip(actions[:, :2], -MAX_EEF_STEP, MAX_EEF_STEP)
            grip = actions[:, 2]
        elif k == "B":
            new += np.clip(actions[:, :3], -MAX_JOINT_STEP, MAX_JOINT_STEP)
            grip = actions[:, 3]
        else:
            dq = np.clip(actions[:, [0, 1, 3, 4]], -MAX_JOINT_STEP, MAX_JOINT_STEP)
            new += dq
            grip = 0.5 * (actions[:, 2] + actions[:, 5])
        self.state = np.where(active[:, None], new, self.state)
        self.grip = np.where(active, np.sign(grip), self.grip)
        if k == "A":
            clipped = np.clip(self.state, 0.0, 1.0)
            self.clip_events += active & np.any(clipped != self.state, axis=1)
            self.state = clipped
        else:
            pos = self.position()
            self.clip_events += active & np.any((pos < 0.0) | (pos > 1.0), axis=1)
        self.step_count += active
        self.collided |= active & self.in_obstacle()

    def in_obstacle(self) -> np.ndarray:
        d = np.linalg.norm(self.position() - OBSTACLE_CENTER, axis=1)
        return d < OBSTACLE_RADIUS

    def at_goal(self, goal) -> np.ndarray:
        goals = np.array([GOALS[g] for g in goal]) if not isinstance(goal, str) else GOALS[goal][None]
        return np.linalg.norm(self.position() - goals, axis=1) < GOAL_RADIUS

    def reached_any(self) -> np.ndarray:
        return self.at_goal(["red"] * self.n) | self.at_goal(["blue"] * self.n)


def mirror_point(p):
    p = np.array(p, dtype=np.float64)
    p[..., 1] = 1.0 - p[..., 1]
    return p


def sample_starts(rng, n: int) -> np.ndarray:
    return START_LOW + (START_HIGH - START_LOW) * rng.random((n, 2))

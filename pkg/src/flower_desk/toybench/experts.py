"""Scripted experts and homotopy classification."""
from __future__ import annotations

import copy

import numpy as np

from .world import (
    DETOUR_OFFSET,
    GOALS,
    OBSTACLE_CENTER,
    STEP_SIZE,
    ToyWorld,
    _wrap,
    arm3_ik,
    biarm_ik,
)


def waypoint(mode: str) -> np.ndarray:
    sign = 1.0 if mode == "over" else -1.0
    return OBSTACLE_CENTER + np.array([0.0, sign * DETOUR_OFFSET])


def next_position(pos: np.ndarray, goals, modes, step: float = STEP_SIZE) -> np.ndarray:
    """Advance ``step`` along the polyline start -> detour waypoint -> goal.

    Stateless: the waypoint counts as passed once x reaches the obstacle centre.
    """
    pos = np.asarray(pos, dtype=np.float64)
    out = pos.copy()
    for i in range(pos.shape[0]):
        p = pos[i].copy()
        left = step
        wp = waypoint(modes[i])
        goal = GOALS[goals[i]]
        if p[0] < wp[0] - 1e-6:
            d = np.linalg.norm(wp - p)
            if d > left:
                out[i] = p + (wp - p) * (left / d)
                continue
            p = wp.copy()
            left -= d
        d = np.linalg.norm(goal - p)
        out[i] = goal.copy() if d <= left else p + (goal - p) * (left / d)
    return out


def _grip(pos_next, goals):
    g = np.array([GOALS[k] for k in goals])
    near = np.linalg.norm(pos_next - g, axis=1) < 2.0 * 0.06
    return np.where(near, 1.0, -1.0)


def expert_action(world: ToyWorld, goals, modes) -> np.ndarray:
    """One closed-loop expert action per environment."""
    pos = world.position()
    target = next_position(pos, goals, modes)
    grip = _grip(target, goals)
    k = world.emb.key
    if k == "A":
        return np.concatenate([target - pos, grip[:, None]], axis=1)
    if k == "B":
        dq = _wrap(arm3_ik(target) - world.state)
        return np.concatenate([dq, grip[:, None]], axis=1)
    dq = _wrap(biarm_ik(target) - world.state)
    return np.stack([dq[:, 0], dq[:, 1], grip, dq[:, 2], dq[:, 3], grip], axis=1)


def expert_chunk(world: ToyWorld, goals, modes, horizon: int) -> np.ndarray:
    """Plan ``horizon`` expert actions by simulating a private copy of the world."""
    shadow = copy.deepcopy(world)
    acts = []
    for _ in range(horizon):
        a = expert_action(shadow, goals, modes)
        reached = shadow.at_goal(list(goals))
        a = np.where(reached[:, None], hold_action(world.emb, a), a)
        acts.append(a)
        shadow.step(a)
    return np.stack(acts, axis=1)


def hold_action(emb, like: np.ndarray | None = None) -> np.ndarray:
    """Zero motion with the gripper closed; used to pad chunks past episode end."""
    d = emb.descriptor.action_dim
    a = np.zeros(d)
    if emb.key == "C":
        a[2] = a[5] = 1.0
    else:
        a[d - 1] = 1.0
    if like is not None:
        return np.broadcast_to(a, like.shape)
    return a


# ----------------------------------------------------------------------------
# homotopy classification


def classify_crossing(path: np.ndarray, collided: bool = False) -> str:
    """Side of the obstacle at the first crossing of its centre column.

    Returns ``"over"``, ``"under"``, ``"collision"`` or ``"none"`` (never crossed).
    """
    if collided:
        return "collision"
    x = path[:, 0] - OBSTACLE_CENTER[0]
    for i in range(len(x) - 1):
        if x[i] < 0.0 <= x[i + 1]:
            w = -x[i] / (x[i + 1] - x[i])
            y = path[i, 1] + w * (path[i + 1, 1] - path[i, 1])
            return "over" if y > OBSTACLE_CENTER[1] else "under"
    return "none"


def winding_angle(path: np.ndarray) -> float:
    """Total signed angle swept around the obstacle centre along the path."""
    rel = path - OBSTACLE_CENTER
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    return float(np.sum(_wrap(np.diff(ang))))


def classify_winding(path: np.ndarray) -> str:
    """Clockwise sweep from the left side means passing above."""
    return "over" if winding_angle(path) < 0.0 else "under"

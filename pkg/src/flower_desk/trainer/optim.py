"""Two-group AdamW with a warmup / constant / cosine schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..numerics import Parameter, kernels

SCHEDULE_KINDS = ("phased", "constant")


@dataclass
class GroupConfig:
    max_lr: float
    weight_decay: float
    min_lr: float
    final_lr: float

    def validate(self, name: str) -> "GroupConfig":
        if self.max_lr <= 0:
            raise ConfigError(f"{name}: max_lr must be positive")
        if not 0.0 <= self.final_lr <= self.max_lr:
            raise ConfigError(f"{name}: final_lr must lie in [0, max_lr]")
        if self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"{name}: min_lr and weight_decay must be non-negative")
        return self


def flow_group_defaults() -> GroupConfig:
    return GroupConfig(max_lr=1e-4, weight_decay=0.1, min_lr=1e-5, final_lr=1e-5)


def encoder_group_defaults() -> GroupConfig:
    return GroupConfig(max_lr=1e-5, weight_decay=0.001, min_lr=1e-7, final_lr=1e-6)


@dataclass
class ScheduleSpec:
    total_steps: int
    phases: tuple[float, float, float] = (0.01, 0.39, 0.6)
    kind: str = "phased"

    def __post_init__(self):
        self.phases = tuple(float(p) for p in self.phases)
        if self.total_steps < 1:
            raise ConfigError("schedule needs at least one step")
        if len(self.phases) != 3 or any(p < 0 for p in self.phases):
            raise ConfigError("phases must be three non-negative fractions")
        if abs(sum(self.phases) - 1.0) > 1e-9:
            raise ConfigError(f"phase fractions must sum to 1, got {sum(self.phases)}")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")

    @property
    def boundaries(self) -> tuple[float, float]:
        w, c, _ = self.phases
        return w * self.total_steps, (w + c) * self.total_steps


@dataclass
class OptimizerConfig:
    flow: GroupConfig = field(default_factory=flow_group_defaults)
    encoder: GroupConfig = field(default_factory=encoder_group_defaults)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0

    def group(self, name: str) -> GroupConfig:
        if name not in ("flow", "encoder"):
            raise ConfigError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def validate(self) -> "OptimizerConfig":
        self.flow.validate("flow")
        self.encoder.validate("encoder")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: float, group: GroupConfig, schedule: ScheduleSpec) -> float:
    """Linear warmup from 0, constant max, cosine from max down to final.

    Steps past the end clamp to the final rate. The cosine phase never drops
    below ``min_lr``.
    """
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if schedule.kind == "constant":
        return group.max_lr
    T = schedule.total_steps
    if step >= T:
        return group.final_lr
    b1, b2 = schedule.boundaries
    if step < b1:
        return group.max_lr * step / b1
    if step <= b2:
        return group.max_lr
    u = (step - b2) / (T - b2)
    lr = group.final_lr + (group.max_lr - group.final_lr) * 0.5 * (1.0 + math.cos(math.pi * u))
    return max(lr, group.min_lr)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm


class AdamW:
    """Decoupled weight decay Adam over two named parameter groups."""

    def __init__(self, groups: dict[str, list[Parameter]], cfg: OptimizerConfig, schedule: ScheduleSpec):
        self.cfg = cfg.validate()
        self.schedule = schedule
        self.groups = groups
        seen = set()
        for plist in groups.values():
            for p in plist:
                if id(p) in seen:
                    raise ConfigError(f"parameter {p.name!r} appears in two groups")
                seen.add(id(p))
        self.m = {id(p): np.zeros_like(p.data) for plist in groups.values() for p in plist}
        self.v = {id(p): np.zeros_like(p.data) for plist in groups.values() for p in plist}
        self.step_count = 0

    def params(self, trainable_only=True):
        return [p for plist in self.groups.values() for p in plist if p.trainable or not trainable_only]

    def lrs(self, step: int | None = None) -> dict[str, float]:
        s = self.step_count if step is None else step
        return {g: lr_at(s, self.cfg.group(g), self.schedule) for g in self.groups}

    def step(self) -> dict[str, float]:
        """Apply one update with the rates for the current step, then advance."""
        lrs = self.lrs()
        b1, b2 = self.cfg.betas
        t = self.step_count + 1
        bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for gname, plist in self.groups.items():
            gc = self.cfg.group(gname)
            for p in plist:
                if not p.trainable or p.grad is None:
                    continue
                kernels.adamw(p.data, p.grad.astype(p.data.dtype, copy=False), self.m[id(p)], self.v[id(p)],
                              lrs[gname], b1, b2, self.cfg.eps, gc.weight_decay, bc1, bc2)
        self.step_count = t
        return lrs

    def zero_grad(self):
        for p in self.params(trainable_only=False):
            p.grad = None

"""Optimization, checkpointing and experiment orchestration."""
from .loop import HEAD_KINDS, StepRecord, TrainConfig, Trainer, train_step
from .optim import (
    AdamW,
    GroupConfig,
    OptimizerConfig,
    ScheduleSpec,
    clip_grad_norm,
    global_grad_norm,
    lr_at,
)

__all__ = [name for name in dir() if not name.startswith("_")]

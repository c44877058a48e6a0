"""Straight-path flow matching: interpolation, time sampling, loss and an
Euler sampler integrating from noise (t=1) to data (t=0)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as F
from .context import ContextBundle
from .errors import ConfigError, ContractError
from .numerics import SeededRng, Tensor

TIME_DISTRIBUTIONS = ("logit_normal", "uniform")


@dataclass
class FlowSchedule:
    steps: int = 4
    time_dist: str = "logit_normal"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"Euler sampler needs at least one step, got {self.steps}")
        if self.time_dist not in TIME_DISTRIBUTIONS:
            raise ConfigError(f"unknown time distribution {self.time_dist!r}")

    @property
    def grid(self) -> np.ndarray:
        """t_k = 1 - k/N for k = 0..N; endpoints are exactly 1 and 0."""
        g = 1.0 - np.arange(self.steps + 1, dtype=np.float64) / self.steps
        g[-1] = 0.0
        return g

    @classmethod
    def for_descriptor(cls, desc, steps=None, time_dist="logit_normal") -> "FlowSchedule":
        return cls(steps if steps is not None else desc.default_steps, time_dist)


def interpolate(a, z1, t):
    """z_t = (1 - t) a + t z1, evaluated as a + t (z1 - a) so t=0 returns a exactly.

    t=1 is special-cased to return z1 bit for bit as well.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractError(f"flow time must lie in [0, 1]")
    a = np.asarray(a)
    z1 = np.asarray(z1)
    if t.ndim == 1 and a.ndim == 3:
        t = t[:, None, None]
    out = np.where(t == 1.0, z1, a + t * (z1 - a))
    return out.astype(a.dtype, copy=False) if a.dtype == np.float32 else out


def sample_time(dist: str, rng: SeededRng, size=None):
    if dist == "logit_normal":
        return 1.0 / (1.0 + np.exp(-rng.normal(size)))
    if dist == "uniform":
        return rng.uniform(0.0, 1.0, size)
    raise ConfigError(f"unknown time distribution {dist!r}")


@dataclass
class TrainingBatch:
    """One single-embodiment batch of normalized chunks with their draws."""

    actions: np.ndarray  # B x H x d_a, normalized
    bundle: ContextBundle | None
    noise: np.ndarray  # B x H x d_a
    times: np.ndarray  # B
    type_key: object = None
    normalized: bool = True

    def __post_init__(self):
        if self.actions.shape != self.noise.shape:
            raise ContractError("noise and actions must share H and d_a")
        if self.times.shape != (self.actions.shape[0],):
            raise ContractError("one flow time per batch element is required")


def make_batch(actions, bundle, rng: SeededRng, type_key, time_dist="logit_normal", dtype=np.float32):
    actions = np.asarray(actions, dtype=dtype)
    noise = rng.normal(actions.shape).astype(dtype)
    times = sample_time(time_dist, rng, actions.shape[0])
    return TrainingBatch(actions, bundle, noise, times, type_key)


def _check_normalized(batch: TrainingBatch):
    if not batch.normalized or np.any(np.abs(batch.actions) > 1.0 + 1e-5):
        raise ContractError("flow_loss expects normalized action chunks in [-1, 1]")


def flow_loss(model, batch: TrainingBatch, bundle: ContextBundle | None = None) -> Tensor:
    """Batch mean of ||z1 - a - v(z_t, t)||^2, summed over the chunk."""
    _check_normalized(batch)
    bundle = bundle if bundle is not None else batch.bundle
    z_t = interpolate(batch.actions, batch.noise, batch.times).astype(batch.actions.dtype, copy=False)
    target = (batch.noise - batch.actions).astype(batch.actions.dtype, copy=False)
    v = model.velocity(z_t, batch.times, bundle, batch.type_key)
    diff = v - Tensor(target)
    return F.reduce_sum(F.square(diff)) * (1.0 / batch.actions.shape[0])


def l1_loss(model, batch: TrainingBatch, bundle: ContextBundle | None = None) -> Tensor:
    """Deterministic regression head: zero chunk at t=0, mean absolute error against a."""
    _check_normalized(batch)
    bundle = bundle if bundle is not None else batch.bundle
    zeros = np.zeros_like(batch.actions)
    pred = model.velocity(zeros, np.zeros(batch.actions.shape[0]), bundle, batch.type_key)
    return F.reduce_mean(F.absolute(pred - Tensor(batch.actions)))


def euler_sample(model, bundle: ContextBundle, type_key, schedule: FlowSchedule, rng: SeededRng,
                 shape=None, dtype=np.float32, return_noise=False):
    """Integrate z <- z - (1/N) v(z, t_k) from z1 ~ N(0, I) at t=1 down to t=0.

    ``model`` is a FlowModel or any callable ``(z, t, bundle, type_key) -> v``
    working on numpy arrays.
    """
    if schedule.steps < 1:
        raise ConfigError("Euler sampler needs at least one step")
    if shape is None:
        desc = model.registry.resolve(type_key)
        shape = (bundle.batch, desc.chunk_len, desc.action_dim)
    if hasattr(model, "training") and model.training:
        raise ContractError("sampling requires the model in eval mode")
    fn = model.velocity_numpy if hasattr(model, "velocity_numpy") else model
    z1 = rng.normal(shape).astype(dtype)
    z = z1.copy()
    n = schedule.steps
    dt = 1.0 / n
    for k in range(n):
        t_k = 1.0 - k / n
        v = np.asarray(fn(z, np.full(shape[0], t_k), bundle, type_key))
        z = (z - dt * v).astype(dtype, copy=False)
    return (z, z1) if return_noise else z


def predict_l1(model, bundle: ContextBundle, type_key, shape=None):
    desc = model.registry.resolve(type_key)
    if shape is None:
        shape = (bundle.batch, desc.chunk_len, desc.action_dim)
    return model.velocity_numpy(np.zeros(shape, dtype=model._dtype()), np.zeros(shape[0]), bundle, type_key)

"""Mixed-embodiment training loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numerics as F
from ..context import tokenize_batch
from ..errors import ConfigError, TrainingError
from ..flow_transformer import FlowModel
from ..numerics import SeededRng
from ..rectified_flow import TIME_DISTRIBUTIONS, TrainingBatch, flow_loss, l1_loss, sample_time
from ..toybench.dataset import ToyDataset
from ..toybench.world import EMBODIMENTS, embodiment
from .optim import AdamW, OptimizerConfig, ScheduleSpec, clip_grad_norm

HEAD_KINDS = ("flow", "l1_regression")
_STREAM_BATCH = 201


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    head: str = "flow"
    freeze_encoder: bool = False
    weights: dict = field(default_factory=dict)  # embodiment key -> sampling weight
    time_dist: str = "logit_normal"
    schedule: str = "phased"
    phases: tuple = (0.01, 0.39, 0.6)
    seed: int = 0
    log_every: int = 50

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}; expected one of {HEAD_KINDS}")
        if self.time_dist not in TIME_DISTRIBUTIONS:
            raise ConfigError(f"unknown time distribution {self.time_dist!r}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("sampling weights must be non-negative")
        ScheduleSpec(self.steps, self.phases, self.schedule)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = list(self.phases)
        return d


@dataclass
class StepRecord:
    step: int
    embodiment: str
    loss: float
    grad_norm: float
    lr_flow: float
    lr_enc: float


def train_step(model: FlowModel, batch: TrainingBatch, optimizer: AdamW, head: str = "flow",
               bundle=None, step_info: str = "") -> tuple[float, float, dict]:
    """Forward, backward, clip, update. Returns (loss, pre-clip grad norm, lrs)."""
    optimizer.zero_grad()
    loss_fn = flow_loss if head == "flow" else l1_loss
    loss = loss_fn(model, batch, bundle)
    value = float(loss.data)
    if not math.isfinite(value):
        F.get_tape().reset()
        raise TrainingError(f"non-finite loss {value} at step {optimizer.step_count} {step_info}".strip())
    F.backward(loss)
    norm = clip_grad_norm(optimizer.params(), optimizer.cfg.clip_norm)
    lrs = optimizer.step()
    return value, norm, lrs


class Trainer:
    """Owns the model, optimizer and the batch stream for one run."""

    def __init__(self, model: FlowModel, dataset: ToyDataset, cfg: TrainConfig,
                 opt_cfg: OptimizerConfig | None = None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg.validate()
        self.opt_cfg = opt_cfg or OptimizerConfig()
        self.keys = list(dataset.keys)
        for key in self.keys:
            name = EMBODIMENTS[key].name
            if name not in model.registry:
                model.register(EMBODIMENTS[key].descriptor)
            model.registry.set_stats(name, dataset.stats[key])
        w = np.array([float(cfg.weights.get(k, 1.0)) for k in self.keys])
        if w.sum() <= 0:
            raise ConfigError("at least one embodiment needs a positive sampling weight")
        self.weights = w / w.sum()
        model.freeze_encoder(cfg.freeze_encoder)
        model.train()
        self.schedule = ScheduleSpec(cfg.steps, cfg.phases, cfg.schedule)
        self.optimizer = AdamW(model.param_groups(), self.opt_cfg, self.schedule)
        self.rng = SeededRng(cfg.seed, _STREAM_BATCH)
        self.step = 0
        self.history: list[StepRecord] = []
        self._norm_chunks = {}

    # -- data ---------------------------------------------------------------
    def _chunks(self, key):
        if key not in self._norm_chunks:
            arr = self.dataset.arrays(key)
            stats = self.dataset.stats[key]
            self._norm_chunks[key] = stats.normalize(arr.chunks).astype(np.float32)
        return self._norm_chunks[key]

    def sample_batch(self):
        """Draw an embodiment by weight, then a uniform batch of (episode, step) items."""
        key = self.keys[int(self.rng.choice(len(self.keys), p=self.weights))] if len(self.keys) > 1 else self.keys[0]
        arr = self.dataset.arrays(key)
        idx = self.rng.integers(0, len(arr), self.cfg.batch_size)
        actions = self._chunks(key)[idx]
        noise = self.rng.normal(actions.shape).astype(np.float32)
        times = sample_time(self.cfg.time_dist, self.rng, actions.shape[0])
        seq = tokenize_batch([arr.prompts[i] for i in idx], arr.grids[idx], self.model.enc_cfg)
        proprio = arr.proprio[idx] if arr.proprio is not None else None
        name = EMBODIMENTS[key].name
        return key, TrainingBatch(actions, None, noise, times, name), seq, proprio

    # -- optimization -------------------------------------------------------
    def train_step(self) -> StepRecord:
        key, batch, seq, proprio = self.sample_batch()
        self.model.train()
        bundle = self.model.context(seq, batch.type_key, proprio)
        info = f"(embodiment {key}, batch rng counter {self.rng.state()['counter']})"
        loss, norm, lrs = train_step(self.model, batch, self.optimizer, self.cfg.head, bundle, info)
        self.step += 1
        rec = StepRecord(self.step, key, loss, norm, lrs.get("flow", 0.0), lrs.get("encoder", 0.0))
        self.history.append(rec)
        return rec

    def run(self, steps: int | None = None, callback=None) -> list[StepRecord]:
        end = self.cfg.steps if steps is None else min(self.cfg.steps, self.step + steps)
        out = []
        while self.step < end:
            rec = self.train_step()
            out.append(rec)
            if callback is not None:
                callback(rec)
        return out

    def recent_loss(self, window: int = 50, key: str | None = None) -> float:
        recs = [r for r in self.history if key is None or r.embodiment == key][-window:]
        return float(np.mean([r.loss for r in recs])) if recs else float("nan")

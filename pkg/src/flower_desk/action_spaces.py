"""Heterogeneous action spaces: descriptors, normalization, per-type
encoders/decoders and norm gains, and the shared Global-AdaLN controller."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as F
from .errors import DimensionError, LookupFailure, RegistrationError
from .nn import (
    LinearAttention,
    Linear,
    LoraAdapter,
    MLP2,
    Module,
    RMSNorm,
    lora_param_count,
    new_param,
)
from .numerics import SeededRng, Tensor

CONTROL_MODES = ("delta_eef", "joint", "bimanual_joint")
N_SIGNALS = 9  # (shift, scale, gate) for self-attn, cross-attn and MLP


@dataclass
class ActionSpaceDescriptor:
    id: int
    name: str
    action_dim: int
    chunk_len: int
    control_mode: str = "delta_eef"
    uses_proprio: bool = False
    proprio_dim: int = 0
    robot_type: str = "robot"
    frequency_hz: float = 10.0

    def __post_init__(self):
        if self.action_dim < 1 or self.chunk_len < 1:
            raise RegistrationError(f"{self.name}: action_dim and chunk_len must be >= 1")
        if self.control_mode not in CONTROL_MODES:
            raise RegistrationError(f"{self.name}: unknown control mode {self.control_mode!r}")
        if self.uses_proprio and self.proprio_dim < 1:
            raise RegistrationError(f"{self.name}: uses_proprio needs proprio_dim >= 1")

    @property
    def default_steps(self) -> int:
        return 8 if self.control_mode == "bimanual_joint" else 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NormalizationStats:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != self.max.shape:
            raise DimensionError("min and max must have equal shapes")
        if np.any(self.min > self.max):
            raise ValueError("min must not exceed max")

    @classmethod
    def from_data(cls, values) -> "NormalizationStats":
        values = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
        return cls(values.min(axis=0), values.max(axis=0))

    @property
    def dim(self) -> int:
        return self.min.shape[0]

    def _span(self):
        span = self.max - self.min
        return span, span > 0

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"expected last dim {self.dim}, got {x.shape[-1]}")
        span, ok = self._span()
        safe = np.where(ok, span, 1.0)
        return np.where(ok, 2.0 * (x - self.min) / safe - 1.0, 0.0)

    def denormalize(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.dim:
            raise DimensionError(f"expected last dim {self.dim}, got {y.shape[-1]}")
        span, ok = self._span()
        return np.where(ok, (y + 1.0) * 0.5 * span + self.min, self.min)

    def out_of_range(self, x, tol=0.0) -> int:
        """Number of entries outside [min, max]; nothing is clipped."""
        x = np.asarray(x, dtype=np.float64)
        return int(np.sum((x < self.min - tol) | (x > self.max + tol)))

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}

    @classmethod
    def from_dict(cls, d) -> "NormalizationStats":
        return cls(np.array(d["min"]), np.array(d["max"]))


@dataclass
class ActionChunk:
    values: np.ndarray
    descriptor_id: int
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"action chunk must be H x d_a, got {self.values.shape}")
        if self.normalized and np.any(np.abs(self.values) > 1.0 + 1e-6):
            raise ValueError("normalized chunk has values outside [-1, 1]")


def normalize(chunk: ActionChunk, stats: NormalizationStats) -> ActionChunk:
    return ActionChunk(stats.normalize(chunk.values), chunk.descriptor_id, normalized=True)


def denormalize(chunk: ActionChunk, stats: NormalizationStats) -> ActionChunk:
    return ActionChunk(stats.denormalize(chunk.values), chunk.descriptor_id, normalized=False)


class ActionEncoder(MLP2):
    """Per-timestep two-layer MLP from d_a to the model width."""

    def __init__(self, action_dim, model_dim, rng=None):
        super().__init__(action_dim, model_dim, model_dim, rng)


class ActionDecoder(Module):
    """Linear-attention mixing over the chunk tokens, then a zero-initialized head."""

    def __init__(self, model_dim, action_dim, rng=None, heads=1, eps=1e-6):
        self.norm = RMSNorm(model_dim, eps)
        self.mix = LinearAttention(model_dim, heads, rng)
        self.out_norm = RMSNorm(model_dim, eps)
        self.head = Linear(model_dim, action_dim, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.mix(self.norm(x))
        return self.head(self.out_norm(x))


class GlobalAdaLnController(Module):
    """Modulation shared across layers, specialized per action type.

    Each registered type owns a condition embedding and one zero-initialized
    projection d -> 9d that every block uses; per-layer LoRA adapters (also
    zero-initialized on their up side) are the only layer-specific weights.
    """

    def __init__(self, model_dim, n_layers, lora_rank=8, lora_alpha=16.0, rng=None):
        self.model_dim = model_dim
        self.n_layers = n_layers
        self.lora_rank = lora_rank
        self.type_embed: dict[str, F.Parameter] = {}
        self.proj: dict[str, Linear] = {}
        self.lora = [LoraAdapter(model_dim, N_SIGNALS * model_dim, lora_rank, lora_alpha, rng)
                     for _ in range(n_layers)] if lora_rank > 0 else []

    def add_type(self, name: str, rng: SeededRng | None) -> None:
        self.type_embed[name] = new_param((self.model_dim,), rng, 0.02)
        self.proj[name] = Linear(self.model_dim, N_SIGNALS * self.model_dim, rng, zero_init=True)

    @property
    def embedding_table(self) -> np.ndarray:
        return np.stack([p.data for p in self.type_embed.values()])

    def signals(self, type_name: str, cond: Tensor, layer: int) -> Tensor:
        if type_name not in self.proj:
            raise LookupFailure(f"action type {type_name!r} is not registered")
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} blocks")
        h = F.silu(cond + self.type_embed[type_name])
        out = self.proj[type_name](h)
        if self.lora:
            out = out + self.lora[layer].delta(h)
        return out.reshape(cond.shape[0], N_SIGNALS, self.model_dim)

    def all_signals(self, type_name: str, cond: Tensor) -> list[Tensor]:
        """Signals for every layer, computing the shared projection once."""
        if type_name not in self.proj:
            raise LookupFailure(f"action type {type_name!r} is not registered")
        h = F.silu(cond + self.type_embed[type_name])
        base = self.proj[type_name](h)
        shape = (cond.shape[0], N_SIGNALS, self.model_dim)
        if not self.lora:
            sig = base.reshape(*shape)
            return [sig] * self.n_layers
        return [(base + ad.delta(h)).reshape(*shape) for ad in self.lora]


class PerLayerAdaLn(Module):
    """Standard AdaLN-Zero: a separate modulation projection per block."""

    def __init__(self, model_dim, n_layers, rng=None):
        self.model_dim = model_dim
        self.n_layers = n_layers
        self.type_embed: dict[str, F.Parameter] = {}
        self.proj = [Linear(model_dim, N_SIGNALS * model_dim, rng, zero_init=True)
                     for _ in range(n_layers)]

    def add_type(self, name: str, rng: SeededRng | None) -> None:
        self.type_embed[name] = new_param((self.model_dim,), rng, 0.02)

    @property
    def embedding_table(self) -> np.ndarray:
        return np.stack([p.data for p in self.type_embed.values()])

    def signals(self, type_name: str, cond: Tensor, layer: int) -> Tensor:
        if type_name not in self.type_embed:
            raise LookupFailure(f"action type {type_name!r} is not registered")
        h = F.silu(cond + self.type_embed[type_name])
        return self.proj[layer](h).reshape(cond.shape[0], N_SIGNALS, self.model_dim)

    def all_signals(self, type_name: str, cond: Tensor) -> list[Tensor]:
        if type_name not in self.type_embed:
            raise LookupFailure(f"action type {type_name!r} is not registered")
        h = F.silu(cond + self.type_embed[type_name])
        shape = (cond.shape[0], N_SIGNALS, self.model_dim)
        return [p(h).reshape(*shape) for p in self.proj]


def count_controller_params(d_model, K, n_types, n_layers, lora_rank) -> int:
    """Type embeddings + one d -> K*d projection (with bias) per type + per-layer LoRA."""
    embeds = n_types * d_model
    shared = n_types * K * (d_model * d_model + d_model)
    lora = n_layers * lora_param_count(d_model, K * d_model, lora_rank) if lora_rank > 0 else 0
    return embeds + shared + lora


def count_per_layer_adaln_params(d_model, K, n_types, n_layers) -> int:
    return n_types * d_model + n_layers * K * (d_model * d_model + d_model)


class ActionSpaceRegistry(Module):
    """Owns every per-type module; registration allocates all of them at once."""

    def __init__(self, model_dim, n_layers, controller, rng: SeededRng | None = None,
                 decoder_heads=1, eps=1e-6):
        self.model_dim = model_dim
        self.n_layers = n_layers
        self._controller = controller  # owned by the model; not walked here
        self.encoders: dict[str, ActionEncoder] = {}
        self.decoders: dict[str, ActionDecoder] = {}
        self.norm_gains: dict[str, F.Parameter] = {}
        self.proprio: dict[str, MLP2] = {}
        self._descriptors: dict[str, ActionSpaceDescriptor] = {}
        self._by_id: dict[int, str] = {}
        self._stats: dict[str, NormalizationStats] = {}
        self._init_rng = rng
        self._decoder_heads = decoder_heads
        self._eps = eps

    @property
    def controller(self):
        return self._controller

    def register(self, desc: ActionSpaceDescriptor, stats: NormalizationStats | None = None) -> str:
        if desc.name in self._descriptors:
            raise RegistrationError(f"action space {desc.name!r} is already registered")
        if desc.id in self._by_id:
            raise RegistrationError(f"action space id {desc.id} is already used by {self._by_id[desc.id]!r}")
        rng = self._init_rng.spawn(1000 + desc.id) if self._init_rng is not None else None
        d = self.model_dim
        self.encoders[desc.name] = ActionEncoder(desc.action_dim, d, rng)
        self.decoders[desc.name] = ActionDecoder(d, desc.action_dim, rng, self._decoder_heads, self._eps)
        # (layer, {pre-self-attn, pre-MLP}, d)
        self.norm_gains[desc.name] = new_param((self.n_layers, 2, d), None, fill=1.0)
        if desc.uses_proprio:
            self.proprio[desc.name] = MLP2(desc.proprio_dim, d, d, rng)
        self.controller.add_type(desc.name, rng)
        self._descriptors[desc.name] = desc
        self._by_id[desc.id] = desc.name
        if stats is not None:
            self.set_stats(desc.name, stats)
        return desc.name

    def resolve(self, key) -> ActionSpaceDescriptor:
        if isinstance(key, ActionSpaceDescriptor):
            key = key.name
        if isinstance(key, (int, np.integer)):
            if int(key) not in self._by_id:
                raise LookupFailure(f"no action space with id {key}")
            key = self._by_id[int(key)]
        if key not in self._descriptors:
            raise LookupFailure(f"action type {key!r} is not registered")
        return self._descriptors[key]

    def __contains__(self, key):
        try:
            self.resolve(key)
            return True
        except LookupFailure:
            return False

    @property
    def descriptors(self) -> list[ActionSpaceDescriptor]:
        return list(self._descriptors.values())

    def set_stats(self, name: str, stats: NormalizationStats) -> None:
        desc = self.resolve(name)
        if stats.dim != desc.action_dim:
            raise DimensionError(f"{desc.name}: stats have {stats.dim} dims, expected {desc.action_dim}")
        self._stats[desc.name] = stats

    def stats(self, name) -> NormalizationStats:
        desc = self.resolve(name)
        if desc.name not in self._stats:
            raise LookupFailure(f"no normalization stats for {desc.name!r}")
        return self._stats[desc.name]

    def has_stats(self, name) -> bool:
        return self.resolve(name).name in self._stats

    def modulation_signals(self, type_key, cond: Tensor, layer: int) -> Tensor:
        if isinstance(type_key, (int, np.integer)) or isinstance(type_key, ActionSpaceDescriptor):
            type_key = self.resolve(type_key).name
        elif type_key not in self._descriptors:
            raise LookupFailure(f"action type {type_key!r} is not registered")
        return self.controller.signals(type_key, cond, layer)

    def manifest(self) -> list[dict]:
        out = []
        for name, desc in self._descriptors.items():
            entry = desc.to_dict()
            if name in self._stats:
                entry["stats"] = self._stats[name].to_dict()
            out.append(entry)
        return out


def modulation_signals(registry: ActionSpaceRegistry, type_id, cond_vector, layer_index) -> list[Tensor]:
    """The 9 modulation vectors for one (type, layer), each of width d_model."""
    cond = F.as_tensor(cond_vector)
    squeeze = cond.ndim == 1
    if squeeze:
        cond = cond.reshape(1, cond.shape[0])
    sig = registry.modulation_signals(type_id, cond, layer_index)
    parts = [sig[:, i, :] for i in range(N_SIGNALS)]
    return [p.reshape(p.shape[-1]) for p in parts] if squeeze else parts

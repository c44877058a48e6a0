"""Trainable stand-in for a pruned vision-language backbone.

A hashed word tokenizer and a patch embedder feed a shallow pre-norm
transformer; hidden states are read at a configurable depth and projected
(linear, then RMSNorm) into the flow model's width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as F
from .errors import ConfigError, ContractError, DimensionError
from .nn import Attention, Linear, Module, RMSNorm, SwiGLU, new_param
from .numerics import SeededRng, Tensor

PROMPT_TEMPLATE = "Agent Type: {robot_type}, Action Space: {action_space}, Task: {task}"
FUSION_MODES = ("early", "intermediate", "late")
MOD_TEXT, MOD_IMAGE, MOD_PROPRIO, MOD_ACTION = 0, 1, 2, 3

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class PromptSpec:
    robot_type: str
    action_space_name: str
    task: str

    def render(self) -> str:
        for field_name in ("robot_type", "action_space_name", "task"):
            if not getattr(self, field_name).strip():
                raise ContractError(f"prompt field {field_name!r} is empty")
        return PROMPT_TEMPLATE.format(robot_type=self.robot_type,
                                      action_space=self.action_space_name, task=self.task)


@dataclass
class ObservationGrid:
    grid: np.ndarray  # G x G x C
    timestamp: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise DimensionError(f"observation grid must be G x G x C, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ContractError("observation grid has non-finite values")


@dataclass
class ContextEncoderConfig:
    vocab_size: int = 4096
    dim: int = 64
    n_layers: int = 4
    heads: int = 4
    prune_fraction: float = 0.3
    fusion_mode: str = "intermediate"
    grid_size: int = 16
    channels: int = 4
    patch: int = 4
    max_prompt_tokens: int = 16
    dropout: float = 0.0
    mlp_hidden: int | None = None

    def validate(self) -> "ContextEncoderConfig":
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; expected one of {FUSION_MODES}")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ConfigError(f"prune fraction must lie in [0, 1), got {self.prune_fraction}")
        if self.n_layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if self.grid_size % self.patch:
            raise ConfigError(f"grid size {self.grid_size} is not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"encoder dim {self.dim} not divisible by {self.heads} heads")
        return self

    @property
    def n_patches(self) -> int:
        return (self.grid_size // self.patch) ** 2

    @property
    def extraction_index(self) -> int:
        return extraction_index(self.n_layers, 0.0 if self.fusion_mode == "late" else self.prune_fraction)


def extraction_index(n_layers: int, prune_fraction: float) -> int:
    """ceil((1 - rho) * L), guarded against float noise such as 0.7 * 10."""
    raw = (1.0 - prune_fraction) * n_layers
    idx = math.ceil(raw - 1e-9)
    return min(max(idx, 1), n_layers)


@dataclass
class TokenSequence:
    prompt_ids: np.ndarray  # B x P int64
    patches: np.ndarray  # B x Np x (p*p*C)
    modality: np.ndarray  # S

    @property
    def length(self) -> int:
        return self.prompt_ids.shape[1] + self.patches.shape[1]


@dataclass
class ContextBundle:
    """Projected context tokens plus provenance.

    For early fusion ``stream`` keeps the embedded (pre-layer) encoder input,
    because the noised action tokens must be co-processed on every call.
    """

    tokens: Tensor | None
    depth: int
    modality: np.ndarray
    stream: Tensor | None = None
    extra: Tensor | None = None

    @property
    def batch(self) -> int:
        ref = self.tokens if self.tokens is not None else self.stream
        return ref.shape[0]


def prompt_ids(text: str, vocab_size: int, max_tokens: int) -> np.ndarray:
    words = text.split()
    if len(words) > max_tokens:
        raise ContractError(f"prompt has {len(words)} words, limit is {max_tokens}")
    ids = np.zeros(max_tokens, dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = 1 + fnv1a64(w) % (vocab_size - 1)
    return ids


def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    b, g, _, c = grids.shape
    n = g // patch
    x = grids.reshape(b, n, patch, n, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, n * n, patch * patch * c), dtype=np.float32)


def tokenize_batch(prompts, grids: np.ndarray, cfg: ContextEncoderConfig) -> TokenSequence:
    grids = np.asarray(grids, dtype=np.float32)
    if grids.ndim == 3:
        grids = grids[None]
    if grids.shape[1:] != (cfg.grid_size, cfg.grid_size, cfg.channels):
        raise DimensionError(f"grid shape {grids.shape[1:]} does not match config "
                             f"({cfg.grid_size}, {cfg.grid_size}, {cfg.channels})")
    cache: dict[str, np.ndarray] = {}
    rows = []
    for p in prompts:
        text = p.render() if isinstance(p, PromptSpec) else p
        if text not in cache:
            cache[text] = prompt_ids(text, cfg.vocab_size, cfg.max_prompt_tokens)
        rows.append(cache[text])
    ids = np.stack(rows)
    patches = patchify(grids, cfg.patch)
    modality = np.concatenate([np.full(ids.shape[1], MOD_TEXT), np.full(patches.shape[1], MOD_IMAGE)])
    return TokenSequence(ids, patches, modality)


def tokenize(prompt: PromptSpec, obs: ObservationGrid, cfg: ContextEncoderConfig) -> TokenSequence:
    if not prompt.task.strip():
        raise ContractError("task string is empty")
    return tokenize_batch([prompt], obs.grid[None], cfg)


@dataclass(frozen=True)
class FusionPathway:
    mode: str
    depth: int
    cross_attention: bool
    co_process_actions: bool


def fuse_mode_dispatch(mode: str, cfg: ContextEncoderConfig) -> FusionPathway:
    """How the flow blocks consume context under each fusion mode."""
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    if mode == "late":
        return FusionPathway(mode, cfg.n_layers, True, False)
    depth = extraction_index(cfg.n_layers, cfg.prune_fraction)
    if mode == "early":
        return FusionPathway(mode, depth, False, True)
    return FusionPathway(mode, depth, True, False)


class EncoderLayer(Module):
    def __init__(self, dim, heads, rng, dropout=0.0, mlp_hidden=None):
        self.norm1 = RMSNorm(dim)
        self.attn = Attention(dim, heads, rng, mode="self", rotary=False,
                              attn_dropout=dropout, out_dropout=dropout)
        self.norm2 = RMSNorm(dim)
        self.mlp = SwiGLU(dim, mlp_hidden, rng, dropout=dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ContextEncoder(Module):
    MAX_POSITIONS = 64

    def __init__(self, cfg: ContextEncoderConfig, model_dim: int, rng: SeededRng | None):
        cfg.validate()
        self.cfg = cfg
        self.model_dim = model_dim
        d = cfg.dim
        self.tok_embed = new_param((cfg.vocab_size, d), rng, 0.02)
        self.mod_embed = new_param((4, d), rng, 0.02)
        self.pos_embed = new_param((self.MAX_POSITIONS, d), rng, 0.02)
        self.patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, d, rng)
        self.layers = [EncoderLayer(d, cfg.heads, rng, cfg.dropout, cfg.mlp_hidden)
                       for _ in range(cfg.n_layers)]
        self.proj = Linear(d, model_dim, rng, bias=False)
        self.proj_norm = RMSNorm(model_dim)
        self.early_in = Linear(model_dim, d, rng, bias=False) if cfg.fusion_mode == "early" else None
        self._pathway = fuse_mode_dispatch(cfg.fusion_mode, cfg)

    @property
    def pathway(self) -> FusionPathway:
        return self._pathway

    def embed(self, seq: TokenSequence) -> Tensor:
        text = F.embedding(self.tok_embed, seq.prompt_ids)
        img = self.patch_embed(Tensor(seq.patches.astype(self.patch_embed.weight.data.dtype, copy=False)))
        h = F.concat([text, img], axis=1)
        s = h.shape[1]
        if s > self.MAX_POSITIONS:
            raise ContractError(f"{s} context tokens exceed the {self.MAX_POSITIONS}-position table")
        pos = F.embedding(self.pos_embed, np.arange(s)) + F.embedding(self.mod_embed, seq.modality)
        return h + pos

    def encode(self, h: Tensor, depth: int | None = None) -> list[Tensor]:
        """Hidden states after 0..depth layers; layers above ``depth`` never run."""
        depth = self.cfg.n_layers if depth is None else depth
        if not 0 <= depth <= self.cfg.n_layers:
            raise ConfigError(f"depth {depth} outside [0, {self.cfg.n_layers}]")
        states = [h]
        for layer in self.layers[:depth]:
            h = layer(h)
            states.append(h)
        return states

    def project(self, hidden: Tensor) -> Tensor:
        if hidden.shape[-1] != self.cfg.dim:
            raise DimensionError(f"projection expects width {self.cfg.dim}, got {hidden.shape[-1]}")
        return self.proj_norm(self.proj(hidden))

    def bundle(self, seq: TokenSequence, depth: int | None = None) -> ContextBundle:
        depth = self._pathway.depth if depth is None else depth
        h = self.embed(seq)
        if self._pathway.co_process_actions:
            return ContextBundle(None, depth, seq.modality, stream=h)
        states = self.encode(h, depth)
        return ContextBundle(self.project(states[-1]), depth, seq.modality)

    def co_process(self, stream: Tensor, actions: Tensor, depth: int) -> Tensor:
        """Early fusion: append action tokens to the stream and run the encoder."""
        n_ctx = stream.shape[1]
        a = self.early_in(actions)
        h = F.concat([stream, a], axis=1)
        states = self.encode(h, depth)
        out = self.project(states[-1])
        return out[:, n_ctx:, :]


def project(hidden, encoder: ContextEncoder) -> ContextBundle:
    hidden = F.as_tensor(hidden)
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = hidden.reshape(1, *hidden.shape)
    tokens = encoder.project(hidden)
    if squeeze:
        tokens = tokens.reshape(tokens.shape[1:])
    return ContextBundle(tokens, encoder.cfg.extraction_index, np.zeros(hidden.shape[-2], dtype=np.int64))

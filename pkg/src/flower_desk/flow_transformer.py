"""The velocity network: context encoder, per-type action modules and a stack
of gated blocks conditioned through the Global-AdaLN controller."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as F
from .action_spaces import (
    N_SIGNALS,
    ActionSpaceDescriptor,
    ActionSpaceRegistry,
    GlobalAdaLnController,
    PerLayerAdaLn,
)
from .context import (
    MOD_PROPRIO,
    ContextBundle,
    ContextEncoder,
    ContextEncoderConfig,
    TokenSequence,
)
from .errors import ConfigError, ContractError
from .nn import Attention, FrequencyEmbedder, Module, RMSNorm, SwiGLU, _dropout, abstract_params
from .numerics import SeededRng, Tensor

ADALN_VARIANTS = ("global", "per_layer")


@dataclass
class FlowTransformerConfig:
    n_layers: int = 4
    dim: int = 128
    heads: int = 4
    mlp_hidden: int | None = None
    attn_dropout: float = 0.1
    mlp_dropout: float = 0.1
    resid_dropout: float = 0.1
    rotary_base: float = 10000.0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    adaln: str = "global"
    use_freq_embedder: bool = True
    freq_dim: int = 256
    decoder_heads: int = 1
    eps: float = 1e-6

    def validate(self) -> "FlowTransformerConfig":
        if self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} is not divisible by {self.heads} heads")
        if (self.dim // self.heads) % 2:
            raise ConfigError("head dim must be even for rotary embeddings")
        if self.adaln not in ADALN_VARIANTS:
            raise ConfigError(f"unknown AdaLN variant {self.adaln!r}")
        if self.n_layers < 1:
            raise ConfigError("need at least one flow block")
        return self

    @classmethod
    def paper_scale(cls, **kw) -> "FlowTransformerConfig":
        base = dict(n_layers=18, dim=1024, heads=16)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class FlowBlock(Module):
    """Self-attention, cross-attention and SwiGLU sub-blocks, each wrapped as
    x + gate * Sub(norm(x) * (1 + scale) + shift)."""

    def __init__(self, cfg: FlowTransformerConfig, rng: SeededRng | None):
        d = cfg.dim
        self.self_attn = Attention(d, cfg.heads, rng, mode="self", rotary=True,
                                   attn_dropout=cfg.attn_dropout, rotary_base=cfg.rotary_base, eps=cfg.eps)
        self.cross_norm = RMSNorm(d, cfg.eps)
        self.cross_attn = Attention(d, cfg.heads, rng, mode="cross", attn_dropout=cfg.attn_dropout, eps=cfg.eps)
        self.mlp = SwiGLU(d, cfg.mlp_hidden, rng, cfg.eps, dropout=cfg.mlp_dropout)
        self.eps = cfg.eps
        self.resid_dropout = cfg.resid_dropout

    def _gated(self, x, normed, sig, k, fn):
        shift, scale, gate = sig[:, 3 * k: 3 * k + 1, :], sig[:, 3 * k + 1: 3 * k + 2, :], sig[:, 3 * k + 2: 3 * k + 3, :]
        h = fn(normed * (scale + 1.0) + shift)
        h = _dropout(self, h, self.resid_dropout)
        return x + gate * h

    def forward(self, x: Tensor, sig: Tensor, gains: Tensor, context: Tensor | None, positions) -> Tensor:
        g_attn, g_mlp = gains[0], gains[1]
        x = self._gated(x, F.rms_norm(x, g_attn, self.eps), sig, 0,
                        lambda h: self.self_attn(h, positions=positions))
        if context is not None:
            x = self._gated(x, self.cross_norm(x), sig, 1, lambda h: self.cross_attn(h, context))
        x = self._gated(x, F.rms_norm(x, g_mlp, self.eps), sig, 2, self.mlp)
        return x


class FlowModel(Module):
    """v_theta(z_t, t, context, action type)."""

    def __init__(self, cfg: FlowTransformerConfig, enc_cfg: ContextEncoderConfig,
                 descriptors=(), seed: int = 0, abstract: bool = False):
        cfg.validate()
        enc_cfg.validate()
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        self._seed = seed
        self._abstract = abstract
        root = SeededRng(seed)
        with _maybe_abstract(abstract):
            self.encoder = ContextEncoder(enc_cfg, cfg.dim, root.spawn(1))
            if cfg.adaln == "global":
                self.controller = GlobalAdaLnController(cfg.dim, cfg.n_layers, cfg.lora_rank,
                                                        cfg.lora_alpha, root.spawn(2))
            else:
                self.controller = PerLayerAdaLn(cfg.dim, cfg.n_layers, root.spawn(2))
            self.time_embed = FrequencyEmbedder(cfg.dim, cfg.freq_dim, root.spawn(3))
            self.freq_embed = (FrequencyEmbedder(cfg.dim, cfg.freq_dim, root.spawn(4), scale=1.0)
                               if cfg.use_freq_embedder else None)
            brng = root.spawn(5)
            self.blocks = [FlowBlock(cfg, brng) for _ in range(cfg.n_layers)]
            self.registry = ActionSpaceRegistry(cfg.dim, cfg.n_layers, self.controller, root.spawn(6),
                                                cfg.decoder_heads, cfg.eps)
            for desc in descriptors:
                self.register(desc)
        self._rng = root.spawn(7)
        self.set_rng(self._rng)

    # -- registry ---------------------------------------------------------
    def register(self, desc: ActionSpaceDescriptor, stats=None) -> str:
        with _maybe_abstract(self._abstract):
            name = self.registry.register(desc, stats)
        if hasattr(self, "_rng"):
            self.set_rng(self._rng)
        return name

    @property
    def fusion_mode(self) -> str:
        return self.enc_cfg.fusion_mode

    @property
    def dropout_rng(self) -> SeededRng:
        return self._rng

    def set_dropout_rng(self, rng: SeededRng) -> None:
        self._rng = rng
        self.set_rng(rng)

    def set_eval(self):
        return self.eval()

    def set_train(self, mode: bool = True):
        return self.train(mode)

    # -- forward ----------------------------------------------------------
    def context(self, seq: TokenSequence, type_key, proprio=None) -> ContextBundle:
        desc = self.registry.resolve(type_key)
        bundle = self.encoder.bundle(seq)
        if desc.uses_proprio:
            if proprio is None:
                raise ContractError(f"{desc.name} consumes proprioception but none was given")
            p = np.asarray(proprio, dtype=self._dtype()).reshape(bundle.batch, 1, desc.proprio_dim)
            bundle.extra = self.registry.proprio[desc.name](Tensor(p))
            bundle.modality = np.concatenate([bundle.modality, [MOD_PROPRIO]])
        return bundle

    def _dtype(self):
        return self.time_embed.mlp.fc1.weight.data.dtype

    def condition(self, t, desc: ActionSpaceDescriptor, batch: int) -> Tensor:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        cond = self.time_embed(t)
        if self.freq_embed is not None:
            cond = cond + self.freq_embed(np.full(batch, desc.frequency_hz))
        return cond

    def velocity(self, z, t, bundle: ContextBundle, type_key) -> Tensor:
        desc = self.registry.resolve(type_key)
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self._dtype()))
        if z.ndim == 2:
            z = z.reshape(1, *z.shape)
        b, h, da = z.shape
        if da != desc.action_dim:
            raise ContractError(f"{desc.name}: expected action dim {desc.action_dim}, got {da}")
        if bundle.batch != b:
            raise ContractError(f"context batch {bundle.batch} does not match action batch {b}")
        tt = np.asarray(t, dtype=np.float64)
        if np.any(tt < 0.0) or np.any(tt > 1.0):
            raise ContractError("flow time must lie in [0, 1]")

        x = self.registry.encoders[desc.name](z)
        if bundle.stream is not None:
            extra = [bundle.extra] if bundle.extra is not None else []
            mixed = self.encoder.co_process(bundle.stream, F.concat(extra + [x], axis=1), bundle.depth)
            x = mixed[:, len(extra):, :] if extra else mixed
            ctx = None
        else:
            ctx = bundle.tokens if bundle.extra is None else F.concat([bundle.tokens, bundle.extra], axis=1)

        cond = self.condition(tt, desc, b)
        signals = self.controller.all_signals(desc.name, cond)
        gains = self.registry.norm_gains[desc.name]
        positions = np.arange(h)
        for layer, block in enumerate(self.blocks):
            x = block(x, signals[layer], gains[layer], ctx, positions)
        return self.registry.decoders[desc.name](x)

    def velocity_numpy(self, z, t, bundle: ContextBundle, type_key) -> np.ndarray:
        with F.no_grad():
            return self.velocity(z, t, bundle, type_key).data

    def token_stream(self, z, t, bundle: ContextBundle, type_key) -> tuple[np.ndarray, np.ndarray]:
        """(action-encoder output, stream entering the decoder) for identity checks."""
        desc = self.registry.resolve(type_key)
        with F.no_grad():
            z = Tensor(np.asarray(z, dtype=self._dtype()))
            x0 = self.registry.encoders[desc.name](z)
            x = x0
            ctx = bundle.tokens if bundle.extra is None else F.concat([bundle.tokens, bundle.extra], axis=1)
            signals = self.controller.all_signals(desc.name, self.condition(t, desc, z.shape[0]))
            gains = self.registry.norm_gains[desc.name]
            for layer, block in enumerate(self.blocks):
                x = block(x, signals[layer], gains[layer], ctx, np.arange(z.shape[1]))
        return x0.data, x.data

    # -- parameter groups ---------------------------------------------------
    def param_groups(self) -> dict[str, list[F.Parameter]]:
        groups = {"flow": [], "encoder": []}
        for name, p in self.named_parameters():
            groups["encoder" if name.startswith("encoder.") else "flow"].append(p)
        return groups

    def freeze_encoder(self, frozen: bool = True) -> None:
        for p in self.param_groups()["encoder"]:
            p.set_trainable(not frozen)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.set_value(state[name])


class _maybe_abstract:
    def __init__(self, flag):
        self.flag = flag
        self._cm = None

    def __enter__(self):
        if self.flag:
            self._cm = abstract_params()
            self._cm.__enter__()

    def __exit__(self, *exc):
        if self._cm is not None:
            self._cm.__exit__(*exc)


def velocity_forward(model: FlowModel, z_t, t, bundle: ContextBundle, type_id) -> np.ndarray:
    """Single-chunk convenience wrapper: z_t is H x d_a."""
    z = np.asarray(z_t)
    out = model.velocity_numpy(z[None] if z.ndim == 2 else z, np.atleast_1d(t), bundle, type_id)
    return out[0] if z.ndim == 2 else out

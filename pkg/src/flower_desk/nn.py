"""Layer primitives: RMSNorm, SwiGLU, QK-normed attention with rotary
positions, LoRA adapters, linear attention and scalar embedders."""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import numerics as F
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Parameter, SeededRng, Tensor

_ABSTRACT = [False]


@contextlib.contextmanager
def abstract_params():
    """Build modules whose parameters carry shapes only (no storage)."""
    _ABSTRACT[0] = True
    try:
        yield
    finally:
        _ABSTRACT[0] = False


def new_param(shape, rng: SeededRng | None, std: float = 0.0, fill: float = 0.0) -> Parameter:
    shape = tuple(int(s) for s in shape)
    if _ABSTRACT[0]:
        return Parameter(None, shape=shape)
    dtype = F.default_dtype()
    if std > 0.0:
        rng = rng if rng is not None else SeededRng(0)
        value = (rng.normal(shape) * std).astype(dtype)
    else:
        value = np.full(shape, fill, dtype=dtype)
    return Parameter(value)


class Module:
    training = True

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = ""):
        for name, child in self._children():
            path = f"{prefix}{name}"
            if isinstance(child, Parameter):
                child.name = path
                yield path, child
            else:
                yield from child.named_parameters(path + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_rng(self, rng: SeededRng):
        """Share one dropout stream across every submodule."""
        for m in self.modules():
            m._rng = rng
        return self

    def astype(self, dtype):
        for p in self.parameters():
            if p.materialized:
                p.data = np.ascontiguousarray(p.data, dtype=dtype)
                p.grad = None
        return self

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _dropout(mod: Module, x: Tensor, p: float) -> Tensor:
    if not mod.training or p <= 0.0:
        return x
    return F.dropout(x, p, getattr(mod, "_rng").generator, True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, bias=True, zero_init=False, std=None):
        self.d_in, self.d_out = d_in, d_out
        std = 0.0 if zero_init else (std if std is not None else 1.0 / math.sqrt(d_in))
        self.weight = new_param((d_in, d_out), rng, std)
        self.bias = new_param((d_out,), rng) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class RMSNorm(Module):
    def __init__(self, dim, eps=1e-6, affine=True):
        self.dim = dim
        self.eps = eps
        self.gain = new_param((dim,), None, fill=1.0) if affine else None

    def forward(self, x: Tensor, gain: Tensor | None = None) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DimensionError(f"RMSNorm({self.dim}) got input of width {x.shape[-1]}")
        return F.rms_norm(x, gain if gain is not None else self.gain, self.eps)


def rms_norm(x, layer: RMSNorm) -> Tensor:
    return layer(F.as_tensor(x))


def swiglu_hidden(dim: int) -> int:
    """4d * 2/3 rounded to the nearest multiple of 64 (at least 64)."""
    return max(64, int(round(dim * 8 / 3 / 64)) * 64)


class SwiGLU(Module):
    """Norm(x W1) * SiLU(Norm(x V1)), projected back to the model width."""

    def __init__(self, dim, hidden=None, rng=None, eps=1e-6, dropout=0.0):
        hidden = hidden or swiglu_hidden(dim)
        self.dim, self.hidden = dim, hidden
        self.w1 = Linear(dim, hidden, rng, bias=False)
        self.v1 = Linear(dim, hidden, rng, bias=False)
        self.norm_w = RMSNorm(hidden, eps)
        self.norm_v = RMSNorm(hidden, eps)
        self.out = Linear(hidden, dim, rng, bias=False)
        self.dropout = dropout

    def forward(self, x: Tensor) -> Tensor:
        a = self.norm_w(self.w1(x))
        b = F.silu(self.norm_v(self.v1(x)))
        return _dropout(self, self.out(a * b), self.dropout)


def swiglu_forward(h, layer: SwiGLU) -> Tensor:
    return layer(F.as_tensor(h))


class RotaryEmbedding:
    """cos/sin tables for pairwise rotation; grows on demand."""

    def __init__(self, head_dim: int, base: float = 10000.0):
        if head_dim % 2:
            raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
        self.head_dim = head_dim
        self.base = base
        self.inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
        self._len = 0
        self._cos = self._sin = None

    def tables(self, positions, dtype):
        positions = np.asarray(positions)
        need = int(positions.max()) + 1 if positions.size else 0
        if need > self._len:
            n = max(need, 2 * self._len, 64)
            ang = np.arange(n, dtype=np.float64)[:, None] * self.inv_freq[None, :]
            self._cos, self._sin, self._len = np.cos(ang), np.sin(ang), n
        return self._cos[positions].astype(dtype), self._sin[positions].astype(dtype)


def rope_rotate(x, positions, rotary: RotaryEmbedding) -> Tensor:
    x = F.as_tensor(x)
    if x.shape[-1] % 2:
        raise ConfigError("rotary rotation needs an even head dim")
    cos, sin = rotary.tables(positions, x.dtype)
    return F.rope(x, cos, sin)


class Attention(Module):
    """Multi-head attention with per-head RMS query/key normalization.

    ``mode`` is ``"self"`` or ``"cross"``; in cross mode keys and values come
    from a context sequence of width ``context_dim``.
    """

    def __init__(self, dim, heads, rng=None, mode="self", rotary=False, context_dim=None,
                 attn_dropout=0.0, out_dropout=0.0, rotary_base=10000.0, eps=1e-6):
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        if mode not in ("self", "cross"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.mode = mode
        kv_dim = context_dim or dim
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(kv_dim, dim, rng, bias=False)
        self.v = Linear(kv_dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, bias=False)
        self.q_norm = RMSNorm(self.head_dim, eps)
        self.k_norm = RMSNorm(self.head_dim, eps)
        self.attn_dropout = attn_dropout
        self.out_dropout = out_dropout
        self._rotary = RotaryEmbedding(self.head_dim, rotary_base) if rotary else None
        self._last_weights = None

    @property
    def rotary(self) -> bool:
        return self._rotary is not None

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, context: Tensor | None = None, positions=None,
                keep_weights: bool = False) -> Tensor:
        if self.mode == "cross" and context is None:
            raise ContractError("cross-attention requires a context sequence")
        if self.mode == "self":
            context = x
        if self.rotary and positions is None:
            positions = np.arange(x.shape[1])
        b, t, _ = x.shape
        q = self.q_norm(self._heads(self.q(x)))
        k = self.k_norm(self._heads(self.k(context)))
        v = self._heads(self.v(context))
        if self.rotary and self.mode == "self":
            cos, sin = self._rotary.tables(positions, x.dtype)
            q = F.rope(q, cos, sin)
            k = F.rope(k, cos, sin)
        scores = F.matmul(q * (1.0 / math.sqrt(self.head_dim)), k.transpose(0, 1, 3, 2))
        w = F.softmax(scores, axis=-1)
        if keep_weights:
            self._last_weights = w.data
        w = _dropout(self, w, self.attn_dropout)
        out = F.matmul(w, v).transpose(0, 2, 1, 3).reshape(b, t, self.dim)
        return _dropout(self, self.o(out), self.out_dropout)


def attention_forward(x, layer: Attention, context=None, positions=None) -> Tensor:
    x = F.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        if context is not None:
            context = F.as_tensor(context).reshape(1, *context.shape)
    out = layer(x, context, positions)
    return out.reshape(out.shape[1:]) if squeeze else out


class LoraAdapter(Module):
    """Rank-r bottleneck; the up projection starts at zero."""

    def __init__(self, d_in, d_out, rank=8, alpha=16.0, rng=None):
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.down = new_param((d_in, rank), rng, 1.0 / math.sqrt(d_in))
        self.up = new_param((rank, d_out), None)

    def delta(self, x: Tensor) -> Tensor:
        return F.linear(F.linear(x, self.down), self.up) * self.scaling

    def forward(self, base_out: Tensor, x: Tensor) -> Tensor:
        return base_out + self.delta(x)


def lora_apply(base_out, x, adapter: LoraAdapter) -> Tensor:
    return adapter(F.as_tensor(base_out), F.as_tensor(x))


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * d_in + d_out * rank


class MLP2(Module):
    """Linear -> SiLU -> Linear."""

    def __init__(self, d_in, d_hidden, d_out, rng=None):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class FrequencyEmbedder(Module):
    """Sinusoidal features of a scalar followed by a two-layer SiLU projection."""

    def __init__(self, model_dim, freq_dim=256, rng=None, max_period=10000.0, scale=1000.0):
        self.freq_dim = freq_dim
        self.scale = scale
        half = freq_dim // 2
        self._freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
        self.mlp = MLP2(freq_dim, model_dim, model_dim, rng)

    def features(self, values) -> np.ndarray:
        v = np.atleast_1d(np.asarray(values, dtype=np.float64)) * self.scale
        args = v[:, None] * self._freqs[None, :]
        return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(F.default_dtype()
                                                                           if self.mlp.fc1.weight.data is None
                                                                           else self.mlp.fc1.weight.data.dtype)

    def forward(self, values) -> Tensor:
        return self.mlp(Tensor(self.features(values)))


def embed_scalar(value, embedder: FrequencyEmbedder) -> Tensor:
    out = embedder(np.asarray([value]))
    return out.reshape(out.shape[-1])


class LinearAttention(Module):
    """Non-softmax attention with the elu(x)+1 feature map, linear in sequence length."""

    def __init__(self, dim, heads=1, rng=None, eps=1e-6):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.eps = eps
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape

        def heads(y):
            return y.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

        q = F.elu_plus_one(heads(self.q(x)))
        k = F.elu_plus_one(heads(self.k(x)))
        v = heads(self.v(x))
        kv = F.matmul(k.transpose(0, 1, 3, 2), v)  # B,h,dh,dh
        num = F.matmul(q, kv)
        ksum = k.sum(axis=2, keepdims=True)  # B,h,1,dh
        den = F.matmul(q, ksum.transpose(0, 1, 3, 2)) + self.eps  # B,h,T,1
        out = (num / den).transpose(0, 2, 1, 3).reshape(b, t, self.dim)
        return self.o(out)

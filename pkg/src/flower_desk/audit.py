"""Parameter and multiply-count accounting.

Two independent paths: :func:`count_model` walks a live parameter tree,
:func:`closed_form_budget` evaluates the architecture's counting formulas.
They must agree exactly for every constructible configuration.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .action_spaces import N_SIGNALS, ActionSpaceDescriptor
from .context import ContextEncoderConfig, extraction_index
from .flow_transformer import FlowModel, FlowTransformerConfig
from .nn import swiglu_hidden

COMPONENTS = (
    "context_encoder",
    "projections",
    "controller",
    "blocks",
    "action_encoders",
    "action_decoders",
    "type_norms",
    "embedders",
)

# reference widths used when the table is printed at full scale
PAPER_FLOW_BLOCKS = 339_000_000


@dataclass
class ComponentBudget:
    components: dict[str, int]
    flops: int | None = None
    notes: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def table(self, title: str = "parameter budget") -> str:
        rows = [(k, f"{v:,}") for k, v in self.components.items()] + [("total", f"{self.total:,}")]
        if self.flops is not None:
            rows.append(("multiplies / forward", f"{self.flops:,}"))
        w0 = max(len(r[0]) for r in rows + [(title, "")])
        w1 = max(len(r[1]) for r in rows)
        lines = [title, "-" * (w0 + w1 + 3)]
        for i, (k, v) in enumerate(rows):
            if k == "total":
                lines.append("-" * (w0 + w1 + 3))
            lines.append(f"{k:<{w0}}   {v:>{w1}}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "parameters"])
        for k, v in self.components.items():
            w.writerow([k, v])
        w.writerow(["total", self.total])
        return buf.getvalue()


def _component_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "encoder":
        sub = name.split(".")[1]
        return "projections" if sub in ("proj", "proj_norm", "early_in") else "context_encoder"
    if head == "registry":
        kind = name.split(".")[1]
        return {"encoders": "action_encoders", "decoders": "action_decoders",
                "norm_gains": "type_norms", "proprio": "embedders"}[kind]
    if head in ("time_embed", "freq_embed"):
        return "embedders"
    if head == "controller":
        return "controller"
    if head == "blocks":
        return "blocks"
    raise KeyError(f"parameter {name!r} belongs to no known component")


def count_model(model: FlowModel) -> ComponentBudget:
    comps = {k: 0 for k in COMPONENTS}
    for name, p in model.named_parameters():
        comps[_component_of(name)] += p.size
    return ComponentBudget(comps)


# ----------------------------------------------------------------------------
# closed form


def _linear(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def _swiglu(d, hidden=None):
    h = hidden or swiglu_hidden(d)
    return 3 * d * h + 2 * h


def _attention(d, heads, kv_dim=None):
    kv = kv_dim or d
    return 2 * d * d + 2 * kv * d + 2 * (d // heads)


def _mlp2(d_in, d_hidden, d_out):
    return _linear(d_in, d_hidden) + _linear(d_hidden, d_out)


def controller_params(d, n_layers, n_types, lora_rank, variant="global") -> int:
    embeds = n_types * d
    if variant == "per_layer":
        return embeds + n_layers * _linear(d, N_SIGNALS * d)
    lora = n_layers * (lora_rank * d + N_SIGNALS * d * lora_rank) if lora_rank > 0 else 0
    return embeds + n_types * _linear(d, N_SIGNALS * d) + lora


def closed_form_budget(cfg: FlowTransformerConfig, enc: ContextEncoderConfig,
                       descriptors: list[ActionSpaceDescriptor]) -> ComponentBudget:
    d, de, L = cfg.dim, enc.dim, cfg.n_layers
    enc_layer = 2 * de + _attention(de, enc.heads) + _swiglu(de, enc.mlp_hidden)
    backbone = (enc.vocab_size * de + 4 * de + 64 * de
                + _linear(enc.patch * enc.patch * enc.channels, de) + enc.n_layers * enc_layer)
    proj = de * d + d + (d * de if enc.fusion_mode == "early" else 0)
    block = _attention(d, cfg.heads) + d + _attention(d, cfg.heads) + _swiglu(d, cfg.mlp_hidden)
    n = len(descriptors)
    action_enc = sum(_mlp2(x.action_dim, d, d) for x in descriptors)
    action_dec = sum(2 * d + 4 * d * d + _linear(d, x.action_dim) for x in descriptors)
    embed = _mlp2(cfg.freq_dim, d, d) * (2 if cfg.use_freq_embedder else 1)
    embed += sum(_mlp2(x.proprio_dim, d, d) for x in descriptors if x.uses_proprio)
    comps = {
        "context_encoder": backbone,
        "projections": proj,
        "controller": controller_params(d, L, n, cfg.lora_rank, cfg.adaln),
        "blocks": L * block,
        "action_encoders": action_enc,
        "action_decoders": action_dec,
        "type_norms": n * L * 2 * d,
        "embedders": embed,
    }
    return ComponentBudget(comps)


# ----------------------------------------------------------------------------
# AdaLN comparison


@dataclass
class AdaLnComparison:
    n_layers: int
    dim: int
    n_types: int
    lora_rank: int
    per_layer_projection: int  # L * K * (d^2 + d)
    global_projection: int  # types * K * (d^2 + d)
    lora: int  # L * (r d + K d r)
    type_embeddings: int
    blocks: int

    @property
    def global_total(self) -> int:
        return self.global_projection + self.lora + self.type_embeddings

    @property
    def per_layer_total(self) -> int:
        return self.per_layer_projection + self.type_embeddings

    @property
    def savings(self) -> int:
        return self.per_layer_total - self.global_total

    @property
    def relative_savings(self) -> float:
        """Saved parameters as a fraction of blocks plus per-layer conditioning."""
        return self.savings / (self.blocks + self.per_layer_total)

    @property
    def relative_savings_without_lora(self) -> float:
        return (self.per_layer_projection - self.global_projection) / (self.blocks + self.per_layer_total)

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("per-layer AdaLN-Zero projections", f"{self.per_layer_projection:,}"),
            ("Global-AdaLN shared projection", f"{self.global_projection:,}"),
            ("Global-AdaLN per-layer LoRA", f"{self.lora:,}"),
            ("type embeddings", f"{self.type_embeddings:,}"),
            ("flow blocks (reference)", f"{self.blocks:,}"),
            ("absolute savings", f"{self.savings:,}"),
            ("relative savings", f"{100 * self.relative_savings:.2f}%"),
            ("relative savings, LoRA excluded", f"{100 * self.relative_savings_without_lora:.2f}%"),
        ]

    def table(self) -> str:
        rows = self.rows()
        w0 = max(len(a) for a, _ in rows)
        w1 = max(len(b) for _, b in rows)
        return "\n".join(f"{a:<{w0}}   {b:>{w1}}" for a, b in rows)


def compare_adaln(n_layers: int, dim: int, n_types: int, lora_rank: int = 8, heads: int | None = None,
                  blocks_params: int | None = None, mlp_hidden: int | None = None) -> AdaLnComparison:
    """Per-layer vs global modulation cost; ``blocks_params`` defaults to the closed-form block count."""
    if blocks_params is None:
        h = heads or max(1, dim // 64)
        blocks_params = n_layers * (2 * _attention(dim, h) + dim + _swiglu(dim, mlp_hidden))
    lin = _linear(dim, N_SIGNALS * dim)
    return AdaLnComparison(
        n_layers, dim, n_types, lora_rank,
        per_layer_projection=n_layers * lin,
        global_projection=n_types * lin,
        lora=n_layers * (lora_rank * dim + N_SIGNALS * dim * lora_rank) if lora_rank > 0 else 0,
        type_embeddings=n_types * dim,
        blocks=blocks_params,
    )


# ----------------------------------------------------------------------------
# encoder multiplies


def encoder_layer_multiplies(enc: ContextEncoderConfig, seq_len: int) -> int:
    de = enc.dim
    hid = enc.mlp_hidden or swiglu_hidden(de)
    return 4 * seq_len * de * de + 2 * seq_len * seq_len * de + 3 * seq_len * de * hid


@dataclass
class FlopEstimate:
    prune_fraction: float
    depth: int
    n_layers: int
    multiplies: int
    full_multiplies: int

    @property
    def ratio(self) -> float:
        return self.multiplies / self.full_multiplies


def flop_estimate(enc: ContextEncoderConfig, prune_fraction: float | None = None,
                  seq_len: int | None = None) -> FlopEstimate:
    """Matmul multiplies of the executed encoder layers for one context sequence."""
    rho = enc.prune_fraction if prune_fraction is None else prune_fraction
    s = seq_len or (enc.max_prompt_tokens + enc.n_patches)
    depth = extraction_index(enc.n_layers, rho)
    per = encoder_layer_multiplies(enc, s)
    return FlopEstimate(rho, depth, enc.n_layers, depth * per, enc.n_layers * per)


# ----------------------------------------------------------------------------
# paper-scale audit


def paper_scale_descriptors() -> list[ActionSpaceDescriptor]:
    return [
        ActionSpaceDescriptor(0, "delta_eef", 7, 10, "delta_eef"),
        ActionSpaceDescriptor(1, "joint", 8, 10, "joint"),
        ActionSpaceDescriptor(2, "bimanual", 14, 20, "bimanual_joint", True, 14),
    ]


def paper_scale_model(adaln: str = "global", lora_rank: int = 8) -> FlowModel:
    """Shape-only instantiation: 18 blocks of width 1024 with 16 heads, three action types."""
    cfg = FlowTransformerConfig.paper_scale(adaln=adaln, lora_rank=lora_rank)
    enc = ContextEncoderConfig(vocab_size=51289, dim=1024, n_layers=12, heads=16)
    return FlowModel(cfg, enc, paper_scale_descriptors(), abstract=True)


def controller_projection_count(model: FlowModel) -> int:
    """Parameters of the shared modulation projections only (no LoRA, no embeddings)."""
    total = 0
    for name, p in model.named_parameters():
        if name.startswith("controller.proj."):
            total += p.size
    return total

import numpy as np
import pytest

from flower_desk import audit
from flower_desk.context import ContextEncoderConfig
from flower_desk.flow_transformer import FlowModel, FlowTransformerConfig
from flower_desk.toybench import EMBODIMENTS


def _random_config(gen):
    heads = int(gen.choice([1, 2, 4]))
    dim = heads * 2 * int(gen.integers(1, 5))
    cfg = FlowTransformerConfig(
        n_layers=int(gen.integers(1, 4)), dim=dim, heads=heads,
        mlp_hidden=int(gen.choice([0, 24])) or None,
        lora_rank=int(gen.choice([0, 1, 3])), adaln=str(gen.choice(["global", "per_layer"])),
        use_freq_embedder=bool(gen.integers(2)), freq_dim=int(gen.choice([8, 16])),
    )
    eh = int(gen.choice([1, 2]))
    enc = ContextEncoderConfig(
        vocab_size=int(gen.integers(20, 200)), dim=eh * 2 * int(gen.integers(1, 4)), heads=eh,
        n_layers=int(gen.integers(1, 5)), prune_fraction=float(gen.choice([0.0, 0.3, 0.5])),
        fusion_mode=str(gen.choice(["early", "intermediate", "late"])),
        grid_size=8, patch=int(gen.choice([2, 4])), channels=int(gen.integers(1, 5)),
    )
    keys = [k for k in "ABC" if gen.integers(2)] or ["A"]
    return cfg, enc, [EMBODIMENTS[k].descriptor for k in keys]


def test_introspection_matches_closed_form_on_random_configs():
    gen = np.random.default_rng(2024)
    for trial in range(50):
        cfg, enc, descs = _random_config(gen)
        model = FlowModel(cfg, enc, descs, seed=trial)
        live = audit.count_model(model)
        closed = audit.closed_form_budget(cfg, enc, descs)
        assert live.components == closed.components, (trial, cfg, enc)
        assert live.total == sum(p.size for p in model.parameters())


def test_paper_scale_counts():
    model = audit.paper_scale_model()
    assert audit.controller_projection_count(model) == 28_339_200
    cmp = audit.compare_adaln(18, 1024, 3, 8, blocks_params=audit.PAPER_FLOW_BLOCKS)
    assert cmp.global_projection == 28_339_200
    assert cmp.per_layer_projection == 170_035_200
    assert cmp.relative_savings > 0.20
    assert cmp.relative_savings_without_lora == pytest.approx(0.2784, abs=5e-4)
    live = audit.count_model(model)
    assert live.components == audit.closed_form_budget(model.cfg, model.enc_cfg,
                                                       audit.paper_scale_descriptors()).components


def test_paper_scale_is_abstract():
    model = audit.paper_scale_model()
    assert not any(p.materialized for p in model.parameters())


def test_lora_difference_is_exact():
    enc = ContextEncoderConfig(dim=16, heads=2, n_layers=1)
    descs = [EMBODIMENTS["A"].descriptor]
    counts = {}
    for r in (0, 4):
        cfg = FlowTransformerConfig(n_layers=3, dim=16, heads=2, lora_rank=r, freq_dim=16)
        counts[r] = audit.count_model(FlowModel(cfg, enc, descs)).total
    assert counts[4] - counts[0] == 3 * (4 * 16 + 9 * 16 * 4)


def test_degenerate_single_layer_single_type():
    cmp = audit.compare_adaln(1, 64, 1, 8)
    assert cmp.per_layer_projection == cmp.global_projection
    assert cmp.per_layer_total == cmp.global_total - cmp.lora


def test_savings_grow_with_depth():
    values = [audit.compare_adaln(L, 256, 3, 8, heads=4).relative_savings for L in range(2, 33)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_per_layer_variant_matches_compare_adaln():
    cfg = FlowTransformerConfig(n_layers=4, dim=32, heads=2, adaln="per_layer", freq_dim=16)
    enc = ContextEncoderConfig(dim=16, heads=2, n_layers=1)
    descs = [EMBODIMENTS[k].descriptor for k in "ABC"]
    live = audit.count_model(FlowModel(cfg, enc, descs)).components["controller"]
    cmp = audit.compare_adaln(4, 32, 3, 8)
    assert live == cmp.per_layer_total


@pytest.mark.parametrize("rho,ratio", [(0.0, 1.0), (0.2, 0.8), (0.3, 0.7), (0.5, 0.5)])
def test_flop_ratios(rho, ratio):
    enc = ContextEncoderConfig(n_layers=10, dim=32, heads=2)
    assert audit.flop_estimate(enc, rho).ratio == pytest.approx(ratio, abs=1e-12)


def test_flop_estimate_matches_measured_multiplies():
    from flower_desk import numerics as F
    from flower_desk.context import ContextEncoder
    from flower_desk.numerics import SeededRng, Tensor

    enc = ContextEncoderConfig(n_layers=4, dim=16, heads=2, prune_fraction=0.5)
    encoder = ContextEncoder(enc, 16, SeededRng(0))
    s = 9
    before = F.multiply_count()
    with F.no_grad():
        encoder.encode(Tensor(np.ones((1, s, 16), dtype=np.float32)), enc.extraction_index)
    assert F.multiply_count() - before == audit.flop_estimate(enc, 0.5, s).multiplies


def test_budget_table_and_csv():
    budget = audit.closed_form_budget(FlowTransformerConfig(dim=16, heads=2, n_layers=1, freq_dim=16),
                                      ContextEncoderConfig(dim=16, heads=2), [EMBODIMENTS["A"].descriptor])
    table = budget.table("desk")
    assert f"{budget.total:,}" in table
    lines = budget.csv().strip().splitlines()
    assert lines[0] == "component,parameters" and lines[-1] == f"total,{budget.total}"

import numpy as np
import pytest

from flower_desk import numerics as F
from flower_desk.context import (
    ContextEncoder,
    ContextEncoderConfig,
    ObservationGrid,
    PromptSpec,
    extraction_index,
    fuse_mode_dispatch,
    project,
    tokenize,
)
from flower_desk.errors import ConfigError, ContractError
from flower_desk.numerics import SeededRng, Tensor
from flower_desk.toybench import EMBODIMENTS
from flower_desk.toybench.world import TASKS

from conftest import tiny_model, toy_inputs


def test_template_is_bit_exact():
    text = PromptSpec("panda", "delta_eef", "lift block").render()
    assert text == "Agent Type: panda, Action Space: delta_eef, Task: lift block"


def test_tokenize_is_deterministic_and_counts_patches():
    cfg = ContextEncoderConfig(grid_size=8, patch=4, channels=2)
    obs = ObservationGrid(np.random.default_rng(0).random((8, 8, 2)))
    prompt = PromptSpec("panda", "delta_eef", "lift block")
    a, b = tokenize(prompt, obs, cfg), tokenize(prompt, obs, cfg)
    np.testing.assert_array_equal(a.prompt_ids, b.prompt_ids)
    assert a.patches.shape[1] == 4
    assert list(a.modality).count(1) == 4


def test_empty_task_is_rejected():
    cfg = ContextEncoderConfig(grid_size=8, patch=4, channels=2)
    with pytest.raises(ContractError):
        tokenize(PromptSpec("panda", "delta_eef", "  "), ObservationGrid(np.zeros((8, 8, 2))), cfg)


def test_builtin_prompts_have_no_hash_collisions():
    cfg = ContextEncoderConfig()
    words = {}
    for emb in EMBODIMENTS.values():
        for goal in TASKS:
            for w in emb.prompt(goal).render().split():
                words.setdefault(w, set())
    from flower_desk.context import prompt_ids
    ids = {w: int(prompt_ids(w, cfg.vocab_size, 1)[0]) for w in words}
    assert len(set(ids.values())) == len(ids)


@pytest.mark.parametrize("rho", [0.0, 0.2, 0.3, 0.5])
@pytest.mark.parametrize("layers", range(4, 17))
def test_extraction_index_formula(rho, layers):
    expected = int(np.ceil(round((1 - rho) * layers, 9)))
    assert extraction_index(layers, rho) == expected
    assert 1 <= expected <= layers


def test_extraction_examples():
    assert extraction_index(10, 0.3) == 7
    assert extraction_index(12, 0.5) == 6
    assert ContextEncoderConfig(n_layers=10, prune_fraction=0.3, fusion_mode="late").extraction_index == 10


def test_upper_layers_never_run():
    cfg = ContextEncoderConfig(n_layers=10, prune_fraction=0.3, dim=16, heads=2)
    enc = ContextEncoder(cfg, 16, SeededRng(0))
    calls = []
    for i, layer in enumerate(enc.layers):
        orig = layer.forward
        layer.forward = (lambda f, i: lambda x: (calls.append(i), f(x))[1])(orig, i)
    enc.encode(Tensor(np.zeros((1, 3, 16), dtype=np.float32)), cfg.extraction_index)
    assert calls == list(range(7))


def test_multiply_count_decreases_with_pruning():
    counts = []
    for rho in (0.0, 0.2, 0.3, 0.5):
        cfg = ContextEncoderConfig(n_layers=10, prune_fraction=rho, dim=16, heads=2)
        enc = ContextEncoder(cfg, 16, SeededRng(0))
        h = Tensor(np.ones((1, 5, 16), dtype=np.float32))
        before = F.multiply_count()
        with F.no_grad():
            enc.encode(h, cfg.extraction_index)
        counts.append(F.multiply_count() - before)
    assert all(a > b for a, b in zip(counts, counts[1:]))
    assert counts[-1] / counts[0] == pytest.approx(0.5)


def test_projection_properties():
    cfg = ContextEncoderConfig(dim=12, heads=2)
    enc = ContextEncoder(cfg, 20, SeededRng(1))
    zero = project(np.zeros((5, 12), dtype=np.float32), enc)
    np.testing.assert_array_equal(zero.tokens.data, 0.0)
    x = np.random.default_rng(0).standard_normal((7, 12)).astype(np.float32)
    a = project(x, enc).tokens.data
    b = project(1000.0 * x, enc).tokens.data
    assert a.shape == (7, 20)
    np.testing.assert_allclose(np.sqrt((a ** 2).mean(-1)), 1.0, atol=1e-4)
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_fusion_dispatch():
    cfg = ContextEncoderConfig(n_layers=6, prune_fraction=0.5)
    assert fuse_mode_dispatch("late", cfg).depth == 6
    assert fuse_mode_dispatch("intermediate", cfg).depth == 3
    assert fuse_mode_dispatch("early", cfg).co_process_actions
    with pytest.raises(ConfigError):
        fuse_mode_dispatch("mid", cfg)
    with pytest.raises(ConfigError):
        ContextEncoderConfig(fusion_mode="mid").validate()


def test_intermediate_with_no_pruning_matches_late():
    mid = tiny_model("intermediate", prune_fraction=0.0, randomize=True)
    late = tiny_model("late", prune_fraction=0.0, randomize=True)
    name, seq, _ = toy_inputs(mid, "A")
    with F.no_grad():
        a, b = mid.context(seq, name), late.context(seq, name)
    assert a.depth == b.depth == 2
    np.testing.assert_array_equal(a.tokens.data, b.tokens.data)


@pytest.mark.parametrize("key", ["A", "C"])
def test_all_fusion_modes_give_same_velocity_shape(key):
    shapes = set()
    for mode in ("early", "intermediate", "late"):
        model = tiny_model(mode, randomize=True)
        name, seq, proprio = toy_inputs(model, key, batch=3)
        model.eval()
        desc = model.registry.resolve(name)
        z = np.zeros((3, desc.chunk_len, desc.action_dim), dtype=np.float32)
        v = model.velocity_numpy(z, np.full(3, 0.5), model.context(seq, name, proprio), name)
        shapes.add(v.shape)
    assert shapes == {(3, desc.chunk_len, desc.action_dim)}

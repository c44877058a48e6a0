import numpy as np
import pytest

from flower_desk import numerics as F


@pytest.fixture
def f64():
    with F.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape):
    return F.Parameter(rng.standard_normal(shape).astype(np.float64))


def tiny_model(fusion="intermediate", seed=0, keys="ABC", dim=16, layers=2, enc_layers=2, dropout=0.0,
               randomize=False, **enc_kw):
    """A small model over the built-in embodiments, optionally with every weight perturbed."""
    from flower_desk.context import ContextEncoderConfig
    from flower_desk.flow_transformer import FlowModel, FlowTransformerConfig
    from flower_desk.toybench import EMBODIMENTS

    cfg = FlowTransformerConfig(n_layers=layers, dim=dim, heads=2, attn_dropout=dropout, mlp_dropout=dropout,
                                resid_dropout=dropout, lora_rank=2, freq_dim=16)
    enc = ContextEncoderConfig(vocab_size=97, dim=dim, n_layers=enc_layers, heads=2, fusion_mode=fusion,
                               max_prompt_tokens=12, **enc_kw)
    model = FlowModel(cfg, enc, [EMBODIMENTS[k].descriptor for k in keys], seed=seed)
    if randomize:
        gen = np.random.default_rng(seed + 100)
        for p in model.parameters():
            p.data += (0.3 * gen.standard_normal(p.shape)).astype(p.data.dtype)
    return model


def toy_inputs(model, key="A", batch=2, seed=0):
    """Tokenized context for random toy scenes plus matching proprio."""
    from flower_desk.context import tokenize_batch
    from flower_desk.toybench import EMBODIMENTS, ToyWorld
    from flower_desk.toybench.world import sample_starts

    emb = EMBODIMENTS[key]
    world = ToyWorld(emb, batch)
    gen = np.random.default_rng(seed)
    world.reset(sample_starts(gen, batch))
    prompts = [emb.prompt("red" if i % 2 == 0 else "blue") for i in range(batch)]
    seq = tokenize_batch(prompts, world.observe(), model.enc_cfg)
    proprio = world.proprio() if emb.descriptor.uses_proprio else None
    return emb.name, seq, proprio


# One line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

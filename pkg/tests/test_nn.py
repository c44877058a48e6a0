import numpy as np
import pytest

from flower_desk import nn
from flower_desk import numerics as F
from flower_desk.errors import ConfigError, ContractError
from flower_desk.numerics import SeededRng, Tensor


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_rms_norm_examples():
    layer = nn.RMSNorm(4, eps=0.0)
    np.testing.assert_array_equal(nn.rms_norm(np.ones(4, dtype=np.float32), layer).data, np.ones(4))
    out = nn.rms_norm(t64([3.0, 4.0]), nn.RMSNorm(2, eps=0.0).astype(np.float64)).data
    np.testing.assert_allclose(out, [0.84853, 1.13137], atol=5e-6)
    np.testing.assert_array_equal(nn.rms_norm(np.zeros(5, dtype=np.float32), nn.RMSNorm(5, 1e-6)).data, np.zeros(5))


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_rms_norm_scale_invariance(rng, c):
    layer = nn.RMSNorm(8, eps=0.0).astype(np.float64)
    x = rng.standard_normal((3, 8))
    np.testing.assert_allclose(nn.rms_norm(t64(c * x), layer).data, nn.rms_norm(t64(x), layer).data, atol=1e-6)


def test_swiglu_zero_paths(f64, rng):
    layer = nn.SwiGLU(16, rng=SeededRng(0))
    x = t64(rng.standard_normal((2, 16)))
    layer.w1.weight.data[:] = 0.0
    np.testing.assert_array_equal(layer(x).data, 0.0)
    layer = nn.SwiGLU(16, rng=SeededRng(0))
    layer.v1.weight.data[:] = 0.0
    np.testing.assert_array_equal(nn.swiglu_forward(x, layer).data, 0.0)


def test_swiglu_hidden_width():
    assert nn.swiglu_hidden(128) == 320
    assert nn.swiglu_hidden(1024) == 2752
    assert nn.SwiGLU(32).hidden == 64


def _layer_loss(out, w):
    return F.reduce_sum(out * w)


def test_swiglu_gradcheck(f64, rng):
    layer = nn.SwiGLU(8, hidden=12, rng=SeededRng(1))
    x = F.Parameter(rng.standard_normal((3, 8)))
    w = rng.standard_normal((3, 8))
    assert F.grad_check(lambda: _layer_loss(layer(x), w), [x] + layer.parameters()) < 1e-5


@pytest.mark.parametrize("mode,rotary", [("self", True), ("self", False), ("cross", False)])
def test_attention_gradcheck(f64, rng, mode, rotary):
    layer = nn.Attention(8, 2, SeededRng(2), mode=mode, rotary=rotary, context_dim=6 if mode == "cross" else None)
    x = F.Parameter(rng.standard_normal((2, 3, 8)))
    ctx = F.Parameter(rng.standard_normal((2, 4, 6))) if mode == "cross" else None
    w = rng.standard_normal((2, 3, 8))
    params = [x] + layer.parameters() + ([ctx] if ctx is not None else [])
    assert F.grad_check(lambda: _layer_loss(layer(x, ctx), w), params) < 1e-5


def test_attention_single_token(f64, rng):
    layer = nn.Attention(8, 2, SeededRng(3))
    x = rng.standard_normal((1, 8))
    out = nn.attention_forward(t64(x), layer).data
    np.testing.assert_allclose(out, x @ layer.v.weight.data @ layer.o.weight.data, atol=1e-12)


def test_attention_identical_tokens_give_identical_outputs(f64, rng):
    layer = nn.Attention(8, 2, SeededRng(4))
    x = np.tile(rng.standard_normal((1, 8)), (5, 1))
    out = nn.attention_forward(t64(x), layer).data
    np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-12)


def test_attention_rows_sum_to_one_and_eval_is_deterministic(rng):
    layer = nn.Attention(16, 4, SeededRng(5), rotary=True, attn_dropout=0.1, out_dropout=0.1)
    layer.set_rng(SeededRng(6)).eval()
    x = Tensor(rng.standard_normal((2, 7, 16)).astype(np.float32))
    a = layer(x, keep_weights=True).data
    np.testing.assert_allclose(layer._last_weights.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(a, layer(x).data)


def test_cross_attention_requires_context():
    layer = nn.Attention(8, 2, SeededRng(0), mode="cross")
    with pytest.raises(ContractError):
        layer(Tensor(np.zeros((1, 2, 8), dtype=np.float32)))


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        nn.Attention(10, 4)


def test_rope_identity_norm_and_relative(rng):
    rot = nn.RotaryEmbedding(8)
    x = rng.standard_normal((1, 1, 8))
    np.testing.assert_array_equal(nn.rope_rotate(t64(x), [0], rot).data, x)
    xs = rng.standard_normal((2, 5, 8))
    out = nn.rope_rotate(t64(xs), np.arange(5), rot).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(xs, axis=-1), atol=1e-6)
    q, k = rng.standard_normal(8), rng.standard_normal(8)

    def dot(p1, p2):
        return float(nn.rope_rotate(t64(q[None]), [p1], rot).data[0] @ nn.rope_rotate(t64(k[None]), [p2], rot).data[0])

    assert dot(3, 1) == pytest.approx(dot(7, 5), abs=1e-5)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ConfigError):
        nn.RotaryEmbedding(7)


def test_rope_table_extends_on_demand():
    rot = nn.RotaryEmbedding(4)
    cos, _ = rot.tables(np.arange(300), np.float64)
    assert cos.shape == (300, 2)


def test_lora_zero_init_and_saturated(f64, rng):
    ad = nn.LoraAdapter(4, 6, rank=4, alpha=8.0, rng=SeededRng(0))
    base = rng.standard_normal(6)
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(nn.lora_apply(t64(base), t64(x), ad).data, base)
    ad.up.data[:] = rng.standard_normal((4, 6))
    m = ad.down.data @ ad.up.data
    np.testing.assert_allclose(nn.lora_apply(t64(base), t64(x), ad).data, base + 2.0 * x @ m, atol=1e-12)


def test_lora_param_count():
    assert nn.lora_param_count(1024, 9216, 8) == 81_920
    with nn.abstract_params():
        ad = nn.LoraAdapter(1024, 9216, rank=8)
    assert ad.num_params() == 81_920


def test_lora_gradcheck(f64, rng):
    ad = nn.LoraAdapter(5, 3, rank=2, rng=SeededRng(1))
    ad.up.data[:] = rng.standard_normal((2, 3))
    x = F.Parameter(rng.standard_normal((4, 5)))
    base = rng.standard_normal((4, 3))
    assert F.grad_check(lambda: F.reduce_sum(F.square(ad(t64(base), x))), [x] + ad.parameters()) < 1e-5


def test_embed_scalar(f64):
    emb = nn.FrequencyEmbedder(16, freq_dim=32, rng=SeededRng(7))
    a = nn.embed_scalar(0.3, emb).data
    np.testing.assert_array_equal(a, nn.embed_scalar(0.3, emb).data)
    assert a.shape == (16,)
    assert not np.allclose(nn.embed_scalar(0.0, emb).data, nn.embed_scalar(1.0, emb).data)


def test_embed_scalar_gradcheck(f64, rng):
    emb = nn.FrequencyEmbedder(8, freq_dim=16, rng=SeededRng(8))
    w = rng.standard_normal(8)
    assert F.grad_check(lambda: F.reduce_sum(nn.embed_scalar(0.42, emb) * w), emb.parameters()) < 1e-5


def test_linear_attention_gradcheck(f64, rng):
    layer = nn.LinearAttention(6, heads=2, rng=SeededRng(9))
    x = F.Parameter(rng.standard_normal((2, 4, 6)))
    w = rng.standard_normal((2, 4, 6))
    assert F.grad_check(lambda: _layer_loss(layer(x), w), [x] + layer.parameters()) < 1e-5


def test_dropout_only_in_training(rng):
    layer = nn.SwiGLU(16, rng=SeededRng(0), dropout=0.5).set_rng(SeededRng(1))
    x = Tensor(rng.standard_normal((4, 16)).astype(np.float32))
    train = layer(x).data
    layer.eval()
    assert not np.array_equal(train, layer(x).data)
    np.testing.assert_array_equal(layer(x).data, layer(x).data)


def test_abstract_params_have_no_storage():
    with nn.abstract_params():
        lin = nn.Linear(1024, 1024)
    assert not lin.weight.materialized
    assert lin.num_params() == 1024 * 1024 + 1024

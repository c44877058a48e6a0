import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flower_desk import numerics as F
from flower_desk.errors import ContractError, DimensionError, NumericError
from flower_desk.numerics import kernels

from conftest import param


def test_matmul_identity_and_hand_case():
    x = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(F.matmul(F.Tensor(np.eye(3)), F.Tensor(x)).data, x)
    out = F.matmul(F.Tensor(np.array([[1.0, 2], [3, 4]])), F.Tensor(np.array([[0.0], [1]])))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        F.matmul(F.Tensor(np.zeros((2, 3))), F.Tensor(np.zeros((4, 5))))


def test_matmul_gradient(f64, rng):
    a, b = param(rng, 5, 7), param(rng, 7, 3)
    err = F.grad_check(lambda: F.reduce_sum(F.square(F.matmul(a, b))), [a, b])
    assert err < 1e-6


def test_elementwise_values():
    assert F.silu(F.Tensor(np.array([0.0]))).data[0] == 0.0
    x = np.array([1.5, -2.0])
    np.testing.assert_array_equal(F.add(F.Tensor(x), 0.0).data, x)


def test_silu_gradient_at_one(f64):
    x = F.Parameter(np.array([1.0]))
    F.backward(F.reduce_sum(F.silu(x)))
    s = 1.0 / (1.0 + np.exp(-1.0))
    assert x.grad[0] == pytest.approx(s + s * (1 - s), abs=1e-12)
    assert x.grad[0] == pytest.approx(0.9277, abs=1e-4)


def test_division_by_exact_zero():
    with pytest.raises(NumericError):
        F.div(F.Tensor(np.ones(2)), F.Tensor(np.array([1.0, 0.0])))


def test_incompatible_broadcast():
    with pytest.raises(DimensionError):
        F.add(F.Tensor(np.ones((2, 3))), F.Tensor(np.ones((2, 4))))


def test_elementwise_dispatch_rejects_unknown():
    with pytest.raises(ContractError):
        F.elementwise("tanh", np.ones(2))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "silu", "sigmoid", "square", "sqrt"])
def test_every_elementwise_primitive_on_random_shapes(f64, op):
    gen = np.random.default_rng(hash(op) % 2**32)
    for trial in range(20):
        shape = tuple(int(s) for s in gen.integers(1, 5, size=gen.integers(1, 4)))
        a = F.Parameter(gen.uniform(0.5, 2.0, shape))
        params = [a]
        if op in ("add", "sub", "mul", "div"):
            b = F.Parameter(gen.uniform(0.5, 2.0, shape[-1:]))  # broadcast over leading axes
            params.append(b)
            fn = lambda: F.reduce_sum(F.square(F.elementwise(op, a, b)))
        else:
            fn = lambda: F.reduce_sum(F.square(F.elementwise(op, a)))
        assert F.grad_check(fn, params) < 1e-6, (op, shape)


def test_reduce_values_and_backward():
    assert F.reduce("mean", np.array([2.0, 4.0, 6.0])).data == 4.0
    x = F.Parameter(np.ones((2, 3)))
    F.backward(F.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_max_routes_gradient_to_first_maximum():
    x = F.Parameter(np.array([1.0, 3.0, 3.0]))
    F.backward(F.reduce_max(x))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reduce_over_empty_axis():
    with pytest.raises(DimensionError):
        F.reduce_sum(F.Tensor(np.zeros((0, 3))), axis=0)


@pytest.mark.parametrize("op", ["sum", "mean", "max"])
def test_reductions_gradcheck(f64, rng, op):
    a = param(rng, 4, 5)
    assert F.grad_check(lambda: F.reduce_sum(F.square(F.reduce(op, a, 1))), [a]) < 1e-6


def test_softmax_examples():
    np.testing.assert_array_equal(F.softmax(F.Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    out = F.softmax(F.Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize("axis", [-1, 0])
def test_softmax_gradient(f64, rng, axis):
    a = param(rng, 4, 6)
    w = rng.standard_normal((4, 6))
    assert F.grad_check(lambda: F.reduce_sum(F.softmax(a, axis) * w), [a]) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_probability_vector(values):
    y = F.softmax(F.Tensor(np.array([values], dtype=np.float64))).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-6


@pytest.mark.parametrize("name", ["exp", "elu_plus_one", "absolute", "rms", "rope", "linear",
                                  "concat", "split", "embedding", "getitem", "transpose"])
def test_structural_primitives_gradcheck(f64, rng, name):
    a = param(rng, 3, 4)
    if name == "exp":
        fn = lambda: F.reduce_sum(F.exp(a))
    elif name == "elu_plus_one":
        fn = lambda: F.reduce_sum(F.square(F.elu_plus_one(a)))
    elif name == "absolute":
        a.data += np.sign(a.data) * 0.1  # keep away from the kink
        fn = lambda: F.reduce_sum(F.square(F.absolute(a)))
    elif name == "rms":
        g = param(rng, 4)
        w = rng.standard_normal((3, 4))
        return _check(lambda: F.reduce_sum(F.rms_norm(a, g, 1e-6) * w), [a, g])
    elif name == "rope":
        ang = rng.uniform(0, 3, (3, 2))
        w = rng.standard_normal((3, 4))
        fn = lambda: F.reduce_sum(F.rope(a, np.cos(ang), np.sin(ang)) * w)
    elif name == "linear":
        w, b = param(rng, 4, 2), param(rng, 2)
        return _check(lambda: F.reduce_sum(F.square(F.linear(a, w, b))), [a, w, b])
    elif name == "concat":
        b = param(rng, 2, 4)
        return _check(lambda: F.reduce_sum(F.square(F.concat([a, b], 0))), [a, b])
    elif name == "split":
        fn = lambda: F.reduce_sum(F.square(F.split(a, 2)[1]))
    elif name == "embedding":
        fn = lambda: F.reduce_sum(F.square(F.embedding(a, np.array([[0, 2], [2, 1]]))))
    elif name == "getitem":
        fn = lambda: F.reduce_sum(F.square(a[1:, ::2]))
    else:
        w = rng.standard_normal((4, 3))
        fn = lambda: F.reduce_sum(F.transpose(a, (1, 0)) * w)
    _check(fn, [a])


def _check(fn, params):
    assert F.grad_check(fn, params) < 1e-6


def test_grad_check_examples(f64, rng):
    x = param(rng, 6)
    assert F.grad_check(lambda: F.reduce_sum(F.square(x)), [x]) < 1e-9
    assert F.grad_check(lambda: F.Tensor(np.array(3.0)) + 0.0, [x]) == 0.0


def test_grad_check_contracts(rng):
    with F.precision(np.float64):
        x = param(rng, 3)
    with pytest.raises(ContractError):
        F.grad_check(lambda: F.square(x), [x])
    y = F.Parameter(np.ones(3, dtype=np.float32))
    with pytest.raises(ContractError):
        F.grad_check(lambda: F.reduce_sum(y), [y])


def test_tape_is_empty_after_backward_and_reset():
    x = F.Parameter(np.ones(3, dtype=np.float32))
    loss = F.reduce_sum(F.square(x * 2.0))
    assert len(F.get_tape()) > 0
    F.backward(loss)
    assert len(F.get_tape()) == 0
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_no_grad_records_nothing():
    x = F.Parameter(np.ones(3, dtype=np.float32))
    with F.no_grad():
        F.reduce_sum(x * x)
    assert len(F.get_tape()) == 0


def test_multiply_count_tracks_matmul():
    before = F.multiply_count()
    F.matmul(F.Tensor(np.ones((2, 3))), F.Tensor(np.ones((3, 4))))
    assert F.multiply_count() - before == 2 * 4 * 3


def test_rng_determinism_and_streams():
    a, b = F.SeededRng(5, 1), F.SeededRng(5, 1)
    np.testing.assert_array_equal(a.normal(8), b.normal(8))
    assert not np.array_equal(F.SeededRng(5, 2).normal(8), F.SeededRng(5, 1).normal(8))
    c = F.SeededRng(9)
    c.uniform(size=3)
    state = c.state()
    first = c.normal(4)
    np.testing.assert_array_equal(F.SeededRng.from_state(state).normal(4), first)


_SCRIPT = """
import numpy as np
from flower_desk import numerics as F
r = F.SeededRng(42)
a = F.Parameter(r.normal((4, 5)).astype(np.float32))
b = F.Parameter(r.normal((5, 3)).astype(np.float32))
loss = F.reduce_sum(F.softmax(F.silu(F.matmul(a, b))))
F.backward(loss)
print(loss.data.tobytes().hex(), a.grad.tobytes().hex())
"""


def test_bit_identical_across_processes():
    outs = [subprocess.run([sys.executable, "-c", _SCRIPT], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert outs[0] == outs[1] and outs[0]


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree(rng):
    x = rng.standard_normal((6, 8))
    g = rng.standard_normal((6, 8))
    gain = rng.standard_normal(8)
    results = {}
    initial = kernels.BACKEND
    for name in ("numpy", "numba"):
        kernels.set_backend(name)
        p, m, v = x.copy(), np.zeros_like(x), np.zeros_like(x)
        kernels.adamw(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.1, 0.001)
        y, inv = kernels.rms_norm_fwd(x, gain, 1e-6)
        gx, gg = kernels.rms_norm_bwd(g, x, gain, inv)
        sm = kernels.softmax_fwd(x)
        sb = kernels.softmax_bwd(g, sm)
        out, sig = kernels.silu_fwd(x)
        results[name] = (y, gx, gg, sm, sb, out, kernels.silu_bwd(g, x, sig), p, m, v)
    kernels.set_backend(initial)
    for a, b in zip(results["numpy"], results["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")

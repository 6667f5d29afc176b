import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, rel_err
from mmdit_adapter.errors import ContractError, DimensionError, NumericError
from mmdit_adapter.tensor import (Tape, Tensor, backward, concat, gelu, grad, layer_norm, linear, matmul,
                                  mean, softmax, softmax_rows, tanh, tsum)


def loop_matmul(a, b):
    p, q = a.shape
    r = b.shape[1]
    c = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for k in range(q):
                acc += a[i, k] * b[k, j]
            c[i, j] = acc
    return c


def loop_layer_norm(row, gamma, beta, eps):
    q = len(row)
    mu = sum(row) / q
    var = sum((x - mu) ** 2 for x in row) / q
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gamma, beta)]


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3))
        out = matmul(Tensor(np.eye(3)), Tensor(a, dtype=np.float64))
        np.testing.assert_array_equal(out.data, a)

    def test_scalar_product(self):
        assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 6))
        out = matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        np.testing.assert_allclose(out, loop_matmul(a, b), rtol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_associativity(self, rng):
        A, B, C = (Tensor(rng.standard_normal(s), dtype=np.float64) for s in ((3, 4), (4, 5), (5, 2)))
        np.testing.assert_allclose(((A @ B) @ C).data, (A @ (B @ C)).data, atol=1e-5)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3], atol=1e-7)

    def test_closed_form(self):
        out = softmax_rows(Tensor(np.array([[0.0, math.log(2)]]), dtype=np.float64)).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_large_inputs_do_not_overflow(self):
        np.testing.assert_array_equal(softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor([[0.0, float("nan")]]))

    @given(arrays(np.float64, (4, 7), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, x):
        out = softmax_rows(Tensor(x, dtype=np.float64)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_float32_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.uniform(-1e3, 1e3, (50, 9)), dtype=np.float32)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-5)
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_already_normalized(self):
        row = np.array([[1.0, -1.0, 1.0, -1.0]])
        out = layer_norm(Tensor(row, dtype=np.float64), eps=1e-5).data
        np.testing.assert_allclose(out, row, atol=1e-3)

    def test_against_scalar_oracle(self, rng):
        x = rng.standard_normal((3, 6))
        g, b = rng.standard_normal(6), rng.standard_normal(6)
        out = layer_norm(Tensor(x, dtype=np.float64), Tensor(g, dtype=np.float64),
                         Tensor(b, dtype=np.float64), eps=1e-5).data
        oracle = np.array([loop_layer_norm(r, g, b, 1e-5) for r in x])
        np.testing.assert_allclose(out, oracle, rtol=1e-6, atol=1e-9)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_saturation(self):
        assert abs(gelu(Tensor(np.array([10.0]), dtype=np.float64)).data[0] - 10.0) < 1e-6

    def test_erf_oracle(self):
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert abs(gelu(Tensor(np.array([1.0]), dtype=np.float64)).data[0] - expected) < 1e-12


class TestBackward:
    def test_square_sum(self, rng):
        x = Tensor(rng.standard_normal(5), dtype=np.float64, requires_grad=True)
        _, (g,) = grad(lambda: tsum(x * x), [x])
        np.testing.assert_allclose(g, 2 * x.data)

    def test_unused_parameter_gets_exact_zero(self, rng):
        x = Tensor(rng.standard_normal(3), dtype=np.float64)
        unused = Tensor(rng.standard_normal((2, 2)), dtype=np.float64)
        _, (gx, gu) = grad(lambda: tsum(x * 3.0), [x, unused])
        np.testing.assert_array_equal(gu, np.zeros((2, 2)))
        np.testing.assert_array_equal(gx, np.full(3, 3.0))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3))
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_three_layer_composition_matches_finite_differences(self, rng):
        d = 5
        x = Tensor(rng.standard_normal((4, d)), dtype=np.float64)
        params = []
        for _ in range(3):
            params += [Tensor(rng.standard_normal((d, d)) / math.sqrt(d), dtype=np.float64),
                       Tensor(rng.standard_normal(d) * 0.1, dtype=np.float64),
                       Tensor(1.0 + 0.1 * rng.standard_normal(d), dtype=np.float64),
                       Tensor(0.1 * rng.standard_normal(d), dtype=np.float64)]

        def loss():
            h = x
            for i in range(3):
                w, b, g, be = params[4 * i:4 * i + 4]
                h = layer_norm(gelu(linear(h, w, b)), g, be)
            return tsum(h * h * h) * (1.0 / h.size)

        _, grads = grad(loss, params)
        for p, g in zip(params, grads):
            u = rng.standard_normal(p.shape)
            u /= np.linalg.norm(u)
            orig = p.data

            def f(v, p=p):
                p.data = v
                return loss().item()

            numeric = central_diff(f, orig, u)
            p.data = orig
            assert rel_err(np.sum(g * u), numeric) < 1e-4

    def test_tape_records_in_topological_order(self):
        a = Tensor(np.ones(2))
        with Tape() as tape:
            b = a * 2.0
            c = b + a
            tsum(c * b)
        seen = set()
        for rec in tape.records:
            for inp in rec.inputs:
                if tape.tracks(inp):
                    assert id(inp) in seen
            seen.add(id(rec.output))


def _check_op(fn, inputs, rng):
    """Directional FD check of ``sum(fn(*inputs) * r)`` w.r.t. every input."""
    ts = [Tensor(v, dtype=np.float64) for v in inputs]
    probe = rng.standard_normal(fn(*ts).shape)

    def loss():
        return tsum(fn(*ts) * Tensor(probe, dtype=np.float64))

    _, grads = grad(loss, ts)
    for t, g in zip(ts, grads):
        u = rng.standard_normal(t.shape)
        u /= np.linalg.norm(u)
        orig = t.data

        def f(v, t=t):
            t.data = v
            return loss().item()

        numeric = central_diff(f, orig, u)
        t.data = orig
        assert rel_err(np.sum(g * u), numeric) < 1e-4


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    "neg": (lambda a: -a, [(2, 3)]),
    "tanh": (tanh, [(3, 4)]),
    "gelu": (gelu, [(3, 4)]),
    "matmul": (matmul, [(2, 3, 4), (4, 5)]),
    "linear": (linear, [(3, 4), (4, 2), (2,)]),
    "softmax": (lambda a: softmax(a, axis=-1), [(3, 5)]),
    "softmax_rows": (softmax_rows, [(3, 5)]),
    "layer_norm": (lambda a, g, b: layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "sum": (lambda a: tsum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: mean(a, axis=0), [(3, 4)]),
    "reshape": (lambda a: a.reshape(4, 3) @ a, [(3, 4)]),
    "swapaxes": (lambda a: a.swapaxes(0, 1) * 2.0, [(3, 4)]),
    "concat": (lambda a, b: concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "getitem": (lambda a: a[:, 1:3] * a[:, :2], [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    fn, shapes = OPS[name]
    _check_op(fn, [rng.standard_normal(s) for s in shapes], rng)


def test_flat_indexing_is_row_major(rng):
    t = Tensor(rng.standard_normal((3, 4, 5)))
    for _ in range(20):
        i, j, k = rng.integers(3), rng.integers(4), rng.integers(5)
        assert t.flat[(i * 4 + j) * 5 + k] == t.data[i, j, k]
        assert t.reshape(12, 5).data[i * 4 + j, k] == t.data[i, j, k]


def test_size_matches_shape(rng):
    t = Tensor(rng.standard_normal((2, 3, 4)))
    assert t.size == int(np.prod(t.shape)) == t.flat.size


def test_default_dtype_is_32_bit():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64

import numpy as np
import pytest

from sparsewin import tensor as T
from sparsewin.tensor import Tape, Tensor


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


class TestMatmul:
    def test_identity(self):
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(Tensor(np.eye(2, dtype=np.float32)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_known_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        b = np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32)
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(out.data, triple_loop_matmul(a, b))

    def test_zeros(self):
        out = T.matmul(T.zeros((2, 3)), Tensor(np.random.default_rng(0).random((3, 4)).astype(np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4), dtype=np.float32))

    def test_random_vs_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.random((5, 7)).astype(np.float32)
        b = rng.random((7, 3)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, triple_loop_matmul(a, b), rtol=1e-6)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(T.zeros((2, 3)), T.zeros((4, 5)))

    def test_batched(self):
        rng = np.random.default_rng(2)
        a = rng.random((4, 3, 5)).astype(np.float32)
        b = rng.random((4, 5, 2)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, np.matmul(a, b))


class TestSoftmax:
    def test_symmetric(self):
        out = T.softmax_lastdim(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-7)

    def test_closed_form(self):
        # exp(0) = 1, exp(ln 3) = 3 -> [1/4, 3/4]
        out = T.softmax_lastdim(Tensor([0.0, float(np.log(3.0))]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-6)

    def test_stabilized_no_overflow(self):
        out = T.softmax_lastdim(Tensor([1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-7)

    def test_slices_sum_to_one_and_open_interval(self):
        rng = np.random.default_rng(3)
        x = Tensor((rng.random((6, 5, 7)) * 10 - 5).astype(np.float32))
        y = T.softmax_lastdim(x).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones((6, 5)), atol=1e-6)
        assert np.all(y > 0) and np.all(y < 1)


class TestLayerNorm:
    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), T.ones(2), T.zeros(2), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_constant_token_zero_variance(self):
        out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), T.ones(3), T.zeros(3), eps=1e-5)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-6)

    def test_random_vs_formula(self):
        rng = np.random.default_rng(4)
        x = rng.random((3, 8)).astype(np.float32)
        gamma = rng.random(8).astype(np.float32)
        beta = rng.random(8).astype(np.float32)
        eps = 1e-5
        out = T.layer_norm(Tensor(x), Tensor(gamma), Tensor(beta), eps)
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + eps) * gamma + beta
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.layer_norm(T.zeros((2, 4)), T.ones(3), T.zeros(3))


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        out = T.gelu(Tensor([20.0])).data[0]
        assert abs(out - 20.0) < 1e-5

    def test_reference_value_at_one(self):
        # 0.5 * 1 * (1 + erf(1/sqrt(2))) = 0.841345
        out = T.gelu(Tensor([1.0])).data[0]
        assert abs(out - 0.8413447) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_square_analytic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_repeated_backward_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_non_scalar_loss_is_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_detached_loss_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        tape = Tape()
        with tape:
            pass
        with pytest.raises(ValueError, match="detached"):
            tape.backward(x)

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        assert y.requires_grad is False


def central_difference(f, x, h=1e-3):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        gflat[i] = (up - dn) / (2 * h)
    return g


def check_gradient(build, *arrays):
    """Analytic-vs-finite-difference check in float64 at step 1e-3."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    tape.backward(loss)
    for t, a in zip(tensors, arrays):
        fd = central_difference(lambda: build(*[Tensor(x) for x in arrays]).item(), a)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(t.grad)), 1e-6)
        rel = np.abs(fd - t.grad) / denom
        assert rel.max() < 1e-3, f"rel err {rel.max()}"


class TestGradientsVsFiniteDifferences:
    rng = np.random.default_rng(11)

    def test_matmul(self):
        a = self.rng.random((3, 4))
        b = self.rng.random((4, 2))
        check_gradient(lambda x, y: T.tsum(T.mul(T.matmul(x, y), T.matmul(x, y))), a, b)

    def test_softmax(self):
        x = self.rng.random((2, 5)) * 4 - 2
        w = self.rng.random((2, 5))
        check_gradient(lambda t: T.tsum(T.mul(T.softmax_lastdim(t), Tensor(w))), x)

    def test_layer_norm(self):
        x = self.rng.random((4, 6)) + 0.5
        g = self.rng.random(6) + 0.5
        b = self.rng.random(6)
        w = self.rng.random((4, 6))
        check_gradient(
            lambda xx, gg, bb: T.tsum(T.mul(T.layer_norm(xx, gg, bb, 1e-5), Tensor(w))),
            x, g, b)

    def test_gelu(self):
        x = self.rng.random((3, 4)) * 4 - 2
        check_gradient(lambda t: T.tsum(T.mul(T.gelu(t), T.gelu(t))), x)

    def test_index_ops(self):
        x = self.rng.random((5, 3))
        v = self.rng.random((2, 3))
        idx = np.array([3, 1])
        w = self.rng.random((2, 3))
        w2 = self.rng.random((5, 3))
        check_gradient(lambda t: T.tsum(T.mul(T.index_select(t, idx), Tensor(w))), x)
        check_gradient(
            lambda base, vals: T.tsum(T.mul(T.index_copy(base, idx, vals), Tensor(w2))),
            x, v)

    def test_roll_transpose_reshape_mean(self):
        x = self.rng.random((2, 4, 4, 3))
        w = self.rng.random((2, 3))
        check_gradient(
            lambda t: T.tsum(T.mul(T.mean(T.roll(T.transpose(t, (0, 2, 1, 3)), (1, -1), (1, 2)),
                                          (1, 2)), Tensor(w))),
            x)

    def test_cross_entropy(self):
        x = self.rng.random((4, 3)) * 2
        labels = np.array([0, 2, 1, 2])
        check_gradient(lambda t: T.cross_entropy(t, labels), x)

    def test_add_bias(self):
        x = self.rng.random((3, 4))
        b = self.rng.random(4)
        w = self.rng.random((3, 4))
        check_gradient(lambda xx, bb: T.tsum(T.mul(T.add(xx, bb), Tensor(w))), x, b)


class TestInvariants:
    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(12)
        x = Tensor((rng.random((4, 6)) * 2000 - 1000).astype(np.float32))
        for out in (T.softmax_lastdim(x), T.gelu(x),
                    T.layer_norm(x, T.ones(6), T.zeros(6))):
            assert np.all(np.isfinite(out.data))

    def test_determinism(self):
        rng = np.random.default_rng(13)
        a = rng.random((16, 16)).astype(np.float32)
        b = rng.random((16, 16)).astype(np.float32)
        r1 = T.matmul(Tensor(a), Tensor(b)).data
        r2 = T.matmul(Tensor(a.copy()), Tensor(b.copy())).data
        assert np.array_equal(r1, r2)

    def test_grad_shape_matches_data(self):
        x = Tensor(np.ones((3, 5), dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.gelu(x))
        tape.backward(loss)
        assert x.grad.shape == x.data.shape

    def test_dtype_mixing_is_error(self):
        with pytest.raises(TypeError):
            T.add(Tensor(np.ones(3, dtype=np.float32)), Tensor(np.ones(3, dtype=np.float64)))

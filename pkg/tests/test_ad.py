import numpy as np
import pytest
from hypothesis import given, strategies as st

from geosod import ad
from geosod.ad import Tensor, grad_check


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_softmax_single(self):
        assert ad.row_softmax(Tensor([[3.7]])).data.tolist() == [[1.0]]

    def test_scatter_mean(self):
        assert ad.scatter_mean_rows(Tensor([[1.0, 1], [3, 3]]), [0, 0], 1).data.tolist() == [[2, 2]]

    def test_scatter_mean_empty_group_is_zero(self):
        out = ad.scatter_mean_rows(Tensor([[1.0], [3.0]]), [0, 2], 3).data
        assert out.tolist() == [[1.0], [0.0], [3.0]]

    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000), st.floats(-50, 50))
    def test_softmax_rows(self, p, q, seed, shift):
        x = np.random.default_rng(seed).normal(scale=10, size=(p, q))
        y = ad.row_softmax(Tensor(x)).data
        assert np.allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        y2 = ad.row_softmax(Tensor(x + shift)).data
        assert np.allclose(y, y2, rtol=0, atol=1e-12)

    def test_softmax_stable_for_huge_inputs(self):
        y = ad.row_softmax(Tensor([[1000.0, 1000.0], [-1e4, 0.0]])).data
        assert np.all(np.isfinite(y))
        assert y[0].tolist() == [0.5, 0.5]

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert np.allclose(ad.row_log_softmax(Tensor(x)).data, np.log(ad.row_softmax(Tensor(x)).data), atol=1e-14)

    @given(st.integers(1, 10), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
    def test_scatter_gather_round_trip(self, n, m, c, seed):
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, m, size=n)
        vals = rng.normal(size=(m, c))
        x = ad.gather_rows(Tensor(vals), ids)
        back = ad.scatter_mean_rows(x, ids, m).data
        present = np.isin(np.arange(m), ids)
        assert np.array_equal(back[present], vals[present])

    def test_shape_errors_name_op(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))
        with pytest.raises(ad.ShapeError, match="concat_rows"):
            ad.concat_rows([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])

    def test_no_grad_records_nothing(self):
        x = leaf([[1.0, 2.0]])
        with ad.no_grad():
            y = ad.sum_all(ad.square(x))
        assert not y.requires_grad and y.op is None


class TestBackward:
    def test_sum_all(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        ad.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_mean_of_square(self):
        xv = np.array([[1.0, -2.0], [0.5, 3.0]])
        x = leaf(xv)
        ad.backward(ad.mean_all(ad.mul(x, x)))
        assert np.allclose(x.grad, xv / 2, rtol=0, atol=1e-15)

    def test_accumulates(self):
        x = leaf([[1.0, 2.0]])
        ad.backward(ad.sum_all(x))
        ad.backward(ad.sum_all(x))
        assert x.grad.tolist() == [[2.0, 2.0]]
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_loss(self):
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.square(leaf([[1.0, 2.0]])))

    def test_shared_subexpression(self):
        x = leaf([[2.0]])
        y = ad.mul(x, x)
        z = ad.sum_all(ad.add(y, ad.mul(y, x)))
        ad.backward(z)
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad.tolist() == [[16.0]]

    def test_hinge_and_relu_kink_conventions(self):
        x = leaf([0.0, -1.0, 2.0])
        ad.backward(ad.sum_all(ad.hinge(x)))
        assert x.grad.tolist() == [0.0, 0.0, 1.0]
        y = leaf([[0.0, 1.0]])
        ad.backward(ad.sum_all(ad.relu(y)))
        assert y.grad.tolist() == [[0.0, 1.0]]

    def test_l2_norm_zero_row_gradient_is_finite(self):
        x = leaf([[0.0, 0.0], [3.0, 4.0]])
        ad.backward(ad.sum_all(ad.l2_norm_rows(x)))
        assert x.grad.tolist() == [[0.0, 0.0], [0.6, 0.8]]


class TestGradCheck:
    def test_relu_mean_5x5(self):
        x = np.random.default_rng(0).normal(size=(5, 5))
        res = grad_check(lambda t: ad.mean_all(ad.relu(t)), [x])
        assert res.max_rel_error <= 1e-6

    def test_linear_is_machine_precision(self):
        # for linear f only rounding of f itself remains: ~eps * |f| / h per coordinate
        rng = np.random.default_rng(1)
        w = rng.uniform(1, 2, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))
        x = rng.normal(size=(4, 3))
        res = grad_check(lambda t: ad.sum_all(ad.mul(t, Tensor(w))), [x])
        f_scale = np.abs(w * x).sum()
        bound = 8 * np.finfo(float).eps * f_scale / 1e-6 / np.abs(w).min()
        assert res.max_rel_error <= bound
        assert res.max_rel_error < 1e-8

    def test_norm_at_zero_is_skipped(self):
        res = grad_check(lambda t: ad.sum_all(ad.l2_norm_rows(t)), [np.zeros((1, 3))])
        assert res.n_checked == 0
        assert len(res.skipped) == 3

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            grad_check(lambda t: ad.sum_all(ad.scalar_mul(t, np.inf)), [np.ones((1, 1))])

    def test_detects_wrong_backward(self, monkeypatch):
        monkeypatch.setattr(ad, "_square_bw", lambda g, x: (g * x.data,))
        res = grad_check(lambda t: ad.sum_all(ad.square(t)), [np.array([[1.0, 2.0]])])
        assert res.max_rel_error > 0.1

    def test_rel_error_formula(self):
        assert ad.rel_error(1.0, 1.0 + 1e-6) == pytest.approx(1e-6 / (1.0 + 1e-6))
        # below the floor the comparison is absolute against the floor
        assert ad.rel_error(1e-9, 2e-9) == pytest.approx(1e-9 / ad.REL_ERROR_FLOOR)


def away(rng, shape):
    return rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


OPS = {
    "add": lambda rng: ((lambda a, b: ad.add(a, b)), [rng.normal(size=(4, 3)), rng.normal(size=(1, 3))]),
    "sub": lambda rng: ((lambda a, b: ad.sub(a, b)), [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]),
    "mul": lambda rng: ((lambda a, b: ad.mul(a, b)), [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]),
    "scalar_mul": lambda rng: ((lambda a: ad.scalar_mul(a, 2.5)), [rng.normal(size=(3, 2))]),
    "relu": lambda rng: (ad.relu, [away(rng, (4, 3))]),
    "hinge": lambda rng: (ad.hinge, [away(rng, (5,))]),
    "square": lambda rng: (ad.square, [rng.normal(size=(3, 3))]),
    "matmul": lambda rng: (ad.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "transpose": lambda rng: (ad.transpose, [rng.normal(size=(3, 4))]),
    "row_softmax": lambda rng: (ad.row_softmax, [rng.normal(size=(3, 4))]),
    "row_log_softmax": lambda rng: (ad.row_log_softmax, [rng.normal(size=(3, 4))]),
    "l2_norm_rows": lambda rng: (ad.l2_norm_rows, [rng.normal(size=(4, 3))]),
    "mean_rows": lambda rng: (ad.mean_rows, [rng.normal(size=(5, 3))]),
    "mean_all": lambda rng: (lambda a: ad.mean_all(ad.square(a)), [rng.normal(size=(3, 3))]),
    "sum_all": lambda rng: (lambda a: ad.sum_all(ad.square(a)), [rng.normal(size=(3, 3))]),
    "concat_rows": lambda rng: ((lambda a, b: ad.concat_rows([a, b])), [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
    "gather_rows": lambda rng: ((lambda a: ad.gather_rows(a, [2, 0, 2, 1])), [rng.normal(size=(3, 2))]),
    "scatter_mean_rows": lambda rng: ((lambda a: ad.scatter_mean_rows(a, [1, 0, 1, 1, 2], 3)), [rng.normal(size=(5, 2))]),
    "take_per_row": lambda rng: ((lambda a: ad.take_per_row(a, [0, 2, 1])), [rng.normal(size=(3, 3))]),
    "attention": lambda rng: (ad.attention, [rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 3))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_20_instances(name):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        op, inputs = OPS[name](rng)
        out_shape = op(*[Tensor(x) for x in inputs]).shape
        w = Tensor(rng.normal(size=out_shape))
        res = grad_check(lambda *xs: ad.sum_all(ad.mul(op(*xs), w)), inputs)
        assert res.n_checked > 0
        assert res.max_rel_error <= 1e-5, (name, seed, res)


class TestAttention:
    def composite(self, q, k, v):
        return ad.matmul(ad.row_softmax(ad.matmul(q, ad.transpose(k))), v)

    @pytest.mark.parametrize("block_bytes", [1, 1 << 22])
    def test_matches_composite(self, monkeypatch, block_bytes):
        monkeypatch.setattr(ad, "ATTENTION_BLOCK_BYTES", block_bytes)
        rng = np.random.default_rng(5)
        arrays = [rng.normal(size=(30, 4)), rng.normal(size=(50, 4)), rng.normal(size=(50, 3))]
        w = Tensor(rng.normal(size=(30, 3)))
        grads = []
        for fn in (ad.attention, self.composite):
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(*ts)
            ad.backward(ad.sum_all(ad.mul(out, w)))
            grads.append([out.data] + [t.grad for t in ts])
        for a, b in zip(*grads):
            assert np.allclose(a, b, rtol=0, atol=1e-12)

    def test_single_key(self):
        out = ad.attention(Tensor(np.ones((3, 2))), Tensor(np.zeros((1, 2))), Tensor(np.array([[4.0, -1.0]])))
        assert np.array_equal(out.data, np.tile([4.0, -1.0], (3, 1)))

    def test_shape_error(self):
        with pytest.raises(ad.ShapeError):
            ad.attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))

    def test_float32_precision(self):
        rng = np.random.default_rng(6)
        arrays = [rng.normal(size=(20, 4)), rng.normal(size=(40, 4)), rng.normal(size=(40, 3))]
        w = Tensor(rng.normal(size=(20, 3)))
        results = []
        for dtype in (np.float64, np.float32):
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            with ad.attention_precision(dtype):
                out = ad.attention(*ts)
            # backward runs outside the block and must keep the forward's precision
            ad.backward(ad.sum_all(ad.mul(out, w)))
            assert out.data.dtype == np.float64 and all(t.grad.dtype == np.float64 for t in ts)
            results.append([out.data] + [t.grad for t in ts])
        for a, b in zip(*results):
            assert np.allclose(a, b, rtol=1e-4, atol=1e-5)
        assert ad._attention_dtype is np.float64

    def test_precision_rejects_other_types(self):
        with pytest.raises(ValueError):
            with ad.attention_precision(np.float16):
                pass

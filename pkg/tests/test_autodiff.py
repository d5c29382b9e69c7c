import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqdistill import autodiff as ad
from seqdistill.autodiff import ShapeError, Tape, Tensor, backward

from oracles import finite_difference_grad


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(build, *arrays_, tol=1e-4):
    """Compare tape gradients of ``build(*tensors)`` against central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays_]
    with Tape() as tape:
        loss = build(*leaves)
    backward(tape, loss, leaves)
    for leaf in leaves:
        def f():
            with ad.no_tape():
                return build(*[Tensor(l.values) for l in leaves]).item()
        num = finite_difference_grad(f, leaf.values)
        assert rel_err(leaf.grad, num) < tol


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), x).values, x.values)

    def test_zero(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.values, np.zeros((2, 2)))

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.values, [[19, 22], [43, 50]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_grad(self):
        rng = np.random.default_rng(0)
        check_grad(lambda a, b: ad.tsum(ad.tanh(ad.matmul(a, b))), rng.normal(size=(2, 3, 4)),
                   rng.normal(size=(2, 4, 2)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).values, [1 / 3] * 3, atol=1e-15)

    def test_two_logits(self):
        c = 0.7
        np.testing.assert_allclose(ad.softmax(Tensor([c, c + math.log(2)])).values, [1 / 3, 2 / 3], atol=1e-12)

    def test_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).values
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
    def test_sums_to_one_and_shift_invariant(self, x, c):
        p = ad.softmax(Tensor(x), axis=-1).values
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(ad.softmax(Tensor(x + c), axis=-1).values, p, atol=1e-9)

    def test_log_softmax_consistent(self):
        x = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(x)).values), ad.softmax(Tensor(x)).values,
                                   atol=1e-12)


class TestCrossEntropy:
    def test_uniform_nll(self):
        t = np.zeros(50)
        t[7] = 1.0
        lp = np.full(50, -math.log(50))
        assert ad.cross_entropy(t, Tensor(lp)).item() == pytest.approx(math.log(50))

    def test_self_is_entropy(self):
        assert ad.cross_entropy([0.5, 0.5], Tensor(np.log([0.5, 0.5]))).item() == pytest.approx(math.log(2))

    def test_hand(self):
        assert ad.cross_entropy([0.9, 0.1], Tensor(np.log([0.5, 0.5]))).item() == pytest.approx(math.log(2))

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            ad.cross_entropy([0.5, 0.6], Tensor(np.log([0.5, 0.5])))

    def test_zero_target_entries_ignore_neg_inf(self):
        assert ad.cross_entropy([1.0, 0.0], Tensor([0.0, -np.inf])).item() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gibbs(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.dirichlet(np.ones(6))
        p = rng.dirichlet(np.ones(6))
        self_ce = ad.cross_entropy(t, Tensor(np.log(t))).item()
        assert self_ce <= ad.cross_entropy(t, Tensor(np.log(p))).item() + 1e-12


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(x * x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_loss_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(Tensor([3.0, 4.0]))
        backward(tape, loss, [x])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_disconnected_leaf(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([5.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(ad.scale(x, 3.0))
        backward(tape, loss, [x, y])
        np.testing.assert_array_equal(x.grad, [3.0])
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_repeated_calls_deterministic(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        grads = []
        for _ in range(2):
            with Tape() as tape:
                loss = ad.tsum(ad.sigmoid(ad.matmul(w, w)))
            backward(tape, loss)
            grads.append(w.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with ad.no_tape():
                ad.tsum(x * x)
        assert len(tape) == 0


class TestPrimitiveGradients:
    """Every primitive against central finite differences."""

    rng = np.random.default_rng(42)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "bias"])
    def test_binary(self, op):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4,) if op == "bias" else (3, 4))
        fn = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "bias": ad.add}[op]
        check_grad(lambda x, y: ad.tsum(ad.tanh(fn(x, y))), a, b)

    @pytest.mark.parametrize("op", [ad.sigmoid, ad.tanh, ad.exp])
    def test_unary(self, op):
        check_grad(lambda x: ad.tsum(ad.mul(op(x), op(x))), self.rng.normal(size=(2, 5)))

    def test_log(self):
        check_grad(lambda x: ad.tsum(ad.log(x)), self.rng.uniform(0.5, 2.0, size=(3, 3)))

    @pytest.mark.parametrize("axis", [0, -1])
    def test_softmax_family(self, axis):
        w = self.rng.normal(size=(3, 4))
        check_grad(lambda x: ad.tsum(ad.mul(ad.softmax(x, axis), Tensor(w))), self.rng.normal(size=(3, 4)))
        check_grad(lambda x: ad.tsum(ad.mul(ad.log_softmax(x, axis), Tensor(w))), self.rng.normal(size=(3, 4)))

    def test_cross_entropy(self):
        t = self.rng.dirichlet(np.ones(5), size=3)
        check_grad(lambda x: ad.cross_entropy(t, ad.log_softmax(x)), self.rng.normal(size=(3, 5)))

    def test_structural(self):
        w = self.rng.normal(size=(2, 6))

        def build(a, b):
            c = ad.concat([a, b], axis=-1)                       # 2x6
            d = ad.take(c, (slice(None), slice(1, 5)))           # 2x4
            e = ad.reshape(ad.transpose(ad.reshape(d, (2, 2, 2))), (2, 4))
            return ad.tmean(ad.mul(ad.concat([e, ad.take(c, (slice(None), slice(0, 2)))]), Tensor(w)))

        check_grad(build, self.rng.normal(size=(2, 3)), self.rng.normal(size=(2, 3)))

    def test_gather_repeated_ids(self):
        ids = np.array([[0, 2], [2, 2]])
        w = self.rng.normal(size=(2, 2, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.gather(t, ids), Tensor(w))), self.rng.normal(size=(4, 3)))

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(Tensor(np.ones((3, 2))), [3])

    def test_tsum_axis(self):
        check_grad(lambda x: ad.tsum(ad.tanh(ad.tsum(x, axis=1))), self.rng.normal(size=(3, 4)))


class TestTensor:
    def test_shape_invariants(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == (2, 3) and t.size == 6 and t.values.dtype == np.float64

    def test_operator_sugar_records(self):
        a = Tensor([[1.0, 2.0]], requires_grad=True)
        b = Tensor([[3.0], [4.0]], requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(a @ b)
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
        np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])

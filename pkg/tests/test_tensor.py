import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cspm import gradcheck
from cspm import tensor as T
from cspm.tensor import Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def weighted_sum(out, w):
    return T.sum(T.mul(out, Tensor(w)))


class TestMatmul:
    def test_identity(self):
        out = T.matmul(T.tensor([[1, 0], [0, 1]]), T.tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        np.testing.assert_array_equal(T.matmul(T.tensor([[1, 2]]), T.tensor([[3], [4]])).data, [[11]])

    def test_grad_of_sum_is_ones_times_bT(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (4, 5)))
        T.sum(T.matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-12)
        num = gradcheck.numerical_grads(lambda: T.sum(T.matmul(a, b)), [a])[0]
        assert gradcheck.max_relative_error([a.grad], [num]) < 1e-4

    def test_batched_left_operand(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.uniform(-2, 2, (2, 3, 4))), leaf(rng.uniform(-2, 2, (4, 2)))
        w = rng.normal(size=(2, 3, 2))
        assert gradcheck.check(lambda: weighted_sum(T.matmul(a, b), w), [a, b]) < 1e-4

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 2))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.elementwise("sigmoid", T.tensor(0.0)).item() == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise("relu", T.tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_sigmoid_derivative_at_zero(self):
        x = leaf([0.0])
        T.sum(T.sigmoid(x)).backward()
        assert x.grad[0] == 0.25

    def test_broadcast_bias(self):
        x, b = leaf(np.ones((3, 2))), leaf([1.0, 2.0])
        out = T.add(x, b)
        np.testing.assert_array_equal(out.data, [[2, 3]] * 3)
        T.sum(out).backward()
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_non_broadcastable(self):
        with pytest.raises(T.DimensionError):
            T.elementwise("add", T.tensor(np.ones((2, 3))), T.tensor(np.ones((3, 2))))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.elementwise("div", T.tensor(1.0), T.tensor(1.0))

    def test_sigmoid_stable_at_extremes(self):
        out = T.sigmoid(T.tensor([-800.0, 800.0])).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_nan_input_is_detected(self):
        with pytest.raises(T.NumericalError), np.errstate(invalid="ignore"):
            T.add(T.tensor([np.inf]), T.tensor([-np.inf]))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(T.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_array_equal(T.softmax(T.tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_direct_evaluation(self):
        # e^x / sum e^x, evaluated independently with math.exp
        e = [math.exp(v) for v in (1, 2, 3)]
        expected = [v / sum(e) for v in e]
        np.testing.assert_allclose(expected, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
        np.testing.assert_allclose(T.softmax(T.tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-14)

    def test_masked_positions_are_exactly_zero(self):
        s = T.softmax(T.tensor([[1.0, 5.0, 2.0]]), mask=[[True, False, True]]).data
        assert s[0, 1] == 0.0
        assert abs(s.sum() - 1) < 1e-12

    def test_fully_masked_row_is_zero(self):
        s = T.softmax(T.tensor([[1.0, 2.0]]), mask=[[False, False]]).data
        np.testing.assert_array_equal(s, [[0.0, 0.0]])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        s = T.softmax(T.tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
        assert (s > 0).all()
        np.testing.assert_allclose(T.softmax(T.tensor(x + c), axis=-1).data, s, atol=1e-9)


class TestConcat:
    def test_values(self):
        np.testing.assert_array_equal(T.concat([T.tensor([[1.0]]), T.tensor([[2.0]])], axis=1).data, [[1, 2]])

    def test_width_law(self):
        parts = [T.tensor(np.zeros((2, 3))) for _ in range(4)]
        assert T.concat(parts, axis=-1).shape == (2, 12)

    def test_backward_routes_slices(self):
        rng = np.random.default_rng(2)
        parts = [leaf(rng.normal(size=(2, k))) for k in (1, 3, 2)]
        upstream = rng.normal(size=(2, 6))
        T.sum(T.mul(T.concat(parts, axis=1), Tensor(upstream))).backward()
        np.testing.assert_array_equal(parts[0].grad, upstream[:, 0:1])
        np.testing.assert_array_equal(parts[1].grad, upstream[:, 1:4])
        np.testing.assert_array_equal(parts[2].grad, upstream[:, 4:6])

    def test_inconsistent(self):
        with pytest.raises(T.DimensionError):
            T.concat([T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 3)))], axis=1)


class TestCosine:
    def test_self(self):
        v = T.tensor([0.3, -1.2, 2.0])
        assert T.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)

    def test_antipodal(self):
        v = T.tensor([0.3, -1.2, 2.0])
        assert T.cosine_similarity(v, T.neg(v)).item() == pytest.approx(-1.0, abs=1e-15)

    def test_known_angle(self):
        assert T.cosine_similarity(T.tensor([1.0, 0.0]), T.tensor([1.0, 1.0])).item() == pytest.approx(1 / math.sqrt(2), abs=1e-7)

    def test_zero_vector_raises(self):
        with pytest.raises(T.DegenerateVectorError):
            T.cosine_similarity(T.tensor([0.0, 0.0]), T.tensor([1.0, 1.0]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10)), arrays(np.float64, (4, 5), elements=st.floats(-10, 10)))
    def test_range(self, a, b):
        if (np.linalg.norm(a, axis=1) < 1e-6).any() or (np.linalg.norm(b, axis=1) < 1e-6).any():
            return
        c = T.cosine_similarity(T.tensor(a), T.tensor(b)).data
        assert ((c >= -1 - 1e-12) & (c <= 1 + 1e-12)).all()


class TestBackward:
    def test_sum(self):
        x = leaf([1.0, 2.0, 3.0])
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = leaf([1.0, 2.0, 3.0])
        T.sum(T.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_non_scalar_loss(self):
        with pytest.raises(T.GraphStateError):
            (leaf([1.0, 2.0]) * 2.0).backward()

    def test_second_backward_is_an_error(self):
        x = leaf([1.0])
        loss = T.sum(T.mul(x, x))
        loss.backward()
        with pytest.raises(T.GraphStateError):
            loss.backward()

    def test_leaf_grads_accumulate_until_reset(self):
        x = leaf([1.0])
        T.sum(x).backward()
        T.sum(x).backward()
        assert x.grad[0] == 2.0
        x.zero_grad()
        T.sum(x).backward()
        assert x.grad[0] == 1.0

    def test_graph_order_is_topological(self):
        x = leaf([1.0, 2.0])
        a = T.mul(x, x)
        b = T.sigmoid(a)
        loss = T.sum(T.add(a, b))
        order = T.graph_order(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]
        assert order[-1] is loss

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            a, b = T.tensor(rng.normal(size=(5, 4))), T.tensor(rng.normal(size=(4, 3)))
            return T.softmax(T.tanh(T.matmul(a, b))).data

        assert run().tobytes() == run().tobytes()

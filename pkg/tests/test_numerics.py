import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xlslu.numerics import (
    DegenerateVectorError, DimensionError, NonFiniteError, Tape, Tensor, backward, concat,
    cosine_matrix, cosine_sim, dot, finite_diff_check, finite_diff_errors, log_softmax,
    log_sum_exp, logaddexp, matmul, normalize_rows, stack,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_tensor_copies_and_freezes_input():
    raw = np.array([1.0, 2.0])
    t = Tensor(raw)
    raw[0] = 9.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 3.0


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        Tensor([0.0]).log()
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert out.data.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_orthogonal_rows(self):
        assert matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data.tolist() == [[0.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        naive = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 2))))

    def test_vector_cases(self):
        assert dot(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).item() == 11.0
        assert matmul(Tensor(np.eye(2)), Tensor([1.0, 2.0])).shape == (2,)


class TestLogSumExp:
    def test_zeros(self):
        assert log_sum_exp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_large_values_do_not_overflow(self):
        assert log_sum_exp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_direct_sum(self):
        v = [0.3, -1.2, 2.0]
        direct = math.log(sum(math.exp(x) for x in v))
        assert log_sum_exp(Tensor(v)).item() == pytest.approx(direct, abs=1e-14)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            log_sum_exp(Tensor(np.zeros(0)))

    def test_axis(self, rng):
        x = rng.normal(size=(3, 4))
        out = log_sum_exp(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data, np.log(np.exp(x).sum(axis=1)), atol=1e-13)
        assert log_sum_exp(Tensor(x), axis=0, keepdims=True).shape == (1, 4)

    @given(arrays(np.float64, st.integers(1, 6), elements=finite), st.floats(-50, 50))
    def test_shift_equivariance(self, v, c):
        a = log_sum_exp(Tensor(v + c)).item()
        assert a == pytest.approx(log_sum_exp(Tensor(v)).item() + c, abs=1e-9)

    @given(arrays(np.float64, st.integers(1, 6), elements=finite))
    def test_bounds(self, v):
        out = log_sum_exp(Tensor(v)).item()
        assert v.max() - 1e-12 <= out <= v.max() + math.log(len(v)) + 1e-12


class TestCosine:
    def test_identical(self):
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]), 1.0).item() == 1.0

    def test_orthogonal(self):
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), 0.5).item() == 0.0

    def test_hand_value(self):
        assert cosine_sim(Tensor([3.0, 4.0]), Tensor([4.0, 3.0]), 0.1).item() == pytest.approx(9.6, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DegenerateVectorError):
            cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            cosine_sim(Tensor([1.0]), Tensor([1.0]), 0.0)

    def test_matrix_matches_pairwise(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        m = cosine_matrix(Tensor(a), Tensor(b), 0.3).data
        for i in range(3):
            for j in range(5):
                assert m[i, j] == pytest.approx(cosine_sim(Tensor(a[i]), Tensor(b[j]), 0.3).item(), abs=1e-12)

    @settings(max_examples=50)
    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite),
           st.floats(0.01, 100))
    def test_scale_invariance(self, a, b, scale):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        base = cosine_sim(Tensor(a), Tensor(b)).item()
        assert cosine_sim(Tensor(a * scale), Tensor(b)).item() == pytest.approx(base, abs=1e-9)
        assert -1 - 1e-12 <= base <= 1 + 1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        grads = backward(x.sum())
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert backward(dot(x, x))[x].tolist() == [2.0, 4.0]

    def test_shared_node_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        z = (y + y).sum()
        assert backward(z)[x].tolist() == [12.0]

    def test_non_scalar_root(self):
        with pytest.raises(ValueError):
            backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_gradient_shapes_match(self, rng):
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3)))
        grads = backward(((x @ w + b).tanh()).sum())
        assert grads[w].shape == w.shape and grads[b].shape == b.shape

    def test_tape_orders_nodes(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        root = (x.exp() * x).sum()
        tape = Tape(root)
        ids = [n._id for n in tape.nodes]
        assert ids == sorted(ids) and tape.nodes[-1] is root
        assert tape.leaves() == [x]

    def test_detached_blocks_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        grads = backward((x * x.detach()).sum())
        assert grads[x].tolist() == [1.0, 2.0]

    def test_replay_is_deterministic(self, rng):
        x0 = rng.normal(size=5)

        def run():
            x = Tensor(x0, requires_grad=True)
            return backward(log_sum_exp(x * x.tanh()) + normalize_rows(x).sum())[x]

        assert run().tobytes() == run().tobytes()


def test_finite_diff_polynomial():
    assert finite_diff_check(lambda x: (x * x).sum(), [3.0]) < 1e-9


# each primitive against central differences over many random points
PRIMITIVES = {
    "add_broadcast": lambda x: (x.reshape(2, 3) + x[:3]).sum(),
    "sub_mul": lambda x: ((x - 0.3) * x[::-1]).sum(),
    "div": lambda x: (x / (x * x + 1.0)).sum(),
    "exp_log": lambda x: ((x * x + 0.5).log() + (x * 0.3).exp()).sum(),
    "tanh_sqrt": lambda x: (x.tanh() + (x * x + 1.0).sqrt()).sum(),
    "matmul": lambda x: (x.reshape(2, 3) @ x.reshape(3, 2)).sum(),
    "mean_axis": lambda x: (x.reshape(2, 3).mean(axis=0) * x[3:]).sum(),
    "transpose_index": lambda x: (x.reshape(2, 3).T[[0, 2, 2]] * 1.5).sum(),
    "log_sum_exp": lambda x: log_sum_exp(x),
    "log_sum_exp_axis": lambda x: (log_sum_exp(x.reshape(2, 3), axis=1) * Tensor([1.0, -2.0])).sum(),
    "logaddexp": lambda x: logaddexp(x[:3], x[3:]).sum(),
    "log_softmax": lambda x: (log_softmax(x.reshape(2, 3)) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "cosine_sim": lambda x: cosine_sim(x[:3], x[3:], 0.7),
    "cosine_matrix": lambda x: (cosine_matrix(x.reshape(3, 2), x.reshape(2, 3).T, 0.2) * 0.1).sum(),
    "concat_stack": lambda x: (concat([x[:2], x[4:]]) * stack([x[1], x[3], x[5], x[0]])).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    f = PRIMITIVES[name]
    worst = max(finite_diff_check(f, rng.uniform(-1.5, 1.5, 6)) for _ in range(100))
    assert worst < 1e-6, name


def test_finite_diff_errors_shape():
    errs = finite_diff_errors(lambda x: (x * x).sum(), np.ones((2, 2)))
    assert errs.shape == (2, 2)
    assert finite_diff_check(lambda x: x.sum() * 0.0, np.zeros(0)) == 0.0

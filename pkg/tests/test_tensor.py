import numpy as np
import pytest

from conftest import assert_grads_close, fd_grad
from lowbit import tensor as T
from lowbit.errors import GraphError, ShapeError
from lowbit.tensor import Tensor, backward


class TestBasics:
    def test_quadratic_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_fanout_accumulates(self):
        x = Tensor(np.array(1.5), requires_grad=True)
        backward(x + x)
        assert x.grad == 2.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            backward(x + x)

    def test_cycle_detected(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x * x
        y._parents = (y,)  # corrupt the graph on purpose
        with pytest.raises(GraphError):
            backward(y)

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        backward(x.detach() * x)
        assert x.grad == 2.0  # only the live factor contributes

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x + x
        assert not y.requires_grad and y._parents == ()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_node_ids_unique(self):
        ts = [Tensor(np.array(0.0)) for _ in range(64)]
        ids = [t.node_id for t in ts]
        assert len(set(ids)) == len(ids)

    def test_float32_default_storage(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float32
        t64 = Tensor(np.array([1.0], dtype=np.float64))
        assert t64.data.dtype == np.float64


class TestDeterminism:
    def test_bit_identical_forward_backward(self, rng):
        a_data = rng.normal(size=(4, 4))
        b_data = rng.normal(size=(4, 4))

        def run():
            a = Tensor(a_data.astype(np.float32), requires_grad=True)
            b = Tensor(b_data.astype(np.float32), requires_grad=True)
            y = T.total_sum(T.tanh(a @ b) * (a + b))
            backward(y)
            return y.data.copy(), a.grad.copy(), b.grad.copy()

        y1, ga1, gb1 = run()
        y2, ga2, gb2 = run()
        assert np.array_equal(y1, y2)
        assert np.array_equal(ga1, ga2)
        assert np.array_equal(gb1, gb2)


class TestGradientsVsFiniteDifference:
    """Every elementwise/reduction op against the 64-bit FD oracle."""

    def _check(self, build, x0, cot=None, h=1e-4):
        def scalar(arr):
            out = build(Tensor(arr))
            v = out.data if cot is None else out.data * cot
            return float(np.sum(v))

        xt = Tensor(x0.copy(), requires_grad=True)
        out = build(xt)
        loss = T.total_sum(out * Tensor(np.asarray(cot))) if cot is not None else T.total_sum(out)
        backward(loss)
        assert_grads_close(xt.grad, fd_grad(scalar, x0.copy(), h=h))

    def test_matmul(self, rng):
        b = rng.normal(size=(3, 2))
        cot = rng.normal(size=(4, 2))
        self._check(lambda t: t @ Tensor(b), rng.normal(size=(4, 3)), cot)

    def test_mul_sub_scale(self, rng):
        x0 = rng.normal(size=(3, 3))
        other = rng.normal(size=(3, 3))
        self._check(lambda t: T.scale(T.sub(t * Tensor(other), t), -2.5), x0)

    def test_tanh(self, rng):
        self._check(T.tanh, rng.normal(size=(5,)))

    def test_abs_away_from_zero(self, rng):
        x0 = rng.normal(size=(5,))
        x0[np.abs(x0) < 0.2] += 0.5
        self._check(T.absolute, x0)

    def test_clip01_inside_and_outside(self):
        x0 = np.array([-0.5, 0.2, 0.8, 1.4])
        xt = Tensor(x0, requires_grad=True)
        backward(T.total_sum(T.clip01(xt)))
        assert np.array_equal(xt.grad, [0.0, 1.0, 1.0, 0.0])

    def test_reduce_max(self, rng):
        x0 = rng.normal(size=(4, 3))
        x0.reshape(-1)[5] += 10.0  # unique max, FD-safe
        self._check(T.reduce_max, x0)

    def test_div_by_scalar_tensor(self, rng):
        x0 = rng.normal(size=(6,))
        flat = np.concatenate([x0, [1.7]])  # last entry is the divisor

        def scalar(arr):
            return float((arr[:-1] / (2.0 * arr[-1])).sum())

        a = Tensor(x0.copy(), requires_grad=True)
        m = Tensor(np.asarray(1.7), requires_grad=True)
        backward(T.total_sum(T.div_by(a, T.scale(m, 2.0))))
        g = fd_grad(scalar, flat.copy())
        assert_grads_close(a.grad, g[:-1])
        assert_grads_close(np.asarray(m.grad), np.asarray(g[-1]))

    def test_mean_all_and_reshape(self, rng):
        x0 = rng.normal(size=(2, 6))
        self._check(lambda t: T.mean_all(T.reshape(t, (3, 4))), x0)

    def test_add_const(self, rng):
        self._check(lambda t: T.add_const(t, 0.5), rng.normal(size=(4,)))

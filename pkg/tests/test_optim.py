import numpy as np
import pytest

from lowbit.errors import OptimizerStateError
from lowbit.optim import Adam, SGDMomentum, make_optimizer
from lowbit.tensor import Tensor


def _param(values):
    p = Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)
    p.grad = np.zeros_like(p.data)
    return p


class TestSGDMomentum:
    def test_zero_grad_zero_velocity_only_decays(self):
        p = _param([2.0, -4.0])
        opt = SGDMomentum([p], lr=0.1, momentum=0.9, weight_decay=0.01)
        opt.step()
        assert np.allclose(p.data, [2.0 * (1 - 0.001), -4.0 * (1 - 0.001)])

    def test_plain_step_arithmetic(self):
        p = _param([1.0])
        p.grad[:] = 2.0
        SGDMomentum([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
        assert np.allclose(p.data, [0.8])

    def test_momentum_two_step_oracle(self):
        p = _param([1.0])
        opt = SGDMomentum([p], lr=0.1, momentum=0.9)
        p.grad[:] = 1.0
        opt.step()          # v=1, p=0.9
        p.grad[:] = 1.0
        opt.step()          # v=1.9, p=0.9-0.19=0.71
        assert np.allclose(p.data, [0.71], atol=1e-7)

    def test_missing_grad(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(OptimizerStateError):
            SGDMomentum([p], lr=0.1).step()

    def test_step_counter(self):
        p = _param([0.0])
        opt = SGDMomentum([p], lr=0.1)
        for i in range(3):
            assert opt.step_count == i
            opt.step()
        assert opt.step_count == 3


class TestAdam:
    def test_single_step_hand_oracle(self):
        # 1-D quadratic f(x) = x^2 at x=3: grad 6.
        p = _param([3.0])
        p.grad[:] = 6.0
        opt = Adam([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
        opt.step()
        m = 0.1 * 6.0
        v = 0.001 * 36.0
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        expect = 3.0 - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.allclose(p.data, [expect], rtol=0, atol=1e-7)

    def test_two_steps_match_reference_recursion(self):
        p = _param([1.0])
        opt = Adam([p], lr=0.05)
        x, m, v = 1.0, 0.0, 0.0
        for t in (1, 2):
            g = 2.0 * x
            p.grad[:] = np.float32(g)
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, [x], atol=1e-6)

    def test_weight_decay_contributes(self):
        p = _param([10.0])
        p.grad[:] = 0.0
        Adam([p], lr=0.1, weight_decay=0.1).step()
        # decayed gradient = 1.0, so a full bias-corrected step of size lr
        assert p.data[0] < 10.0


def test_make_optimizer_dispatch():
    p = _param([1.0])
    assert make_optimizer("sgd_momentum", [p], 0.1).kind == "sgd_momentum"
    assert make_optimizer("adam", [p], 0.1).kind == "adam"
    with pytest.raises(OptimizerStateError):
        make_optimizer("lion", [p], 0.1)

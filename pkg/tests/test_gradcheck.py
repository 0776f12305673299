import numpy as np
import pytest

from mirror_sat import tensor as T
from mirror_sat.gradcheck import gradcheck, op_cases
from mirror_sat.tensor import NonFiniteError, Tensor


def test_sum_of_squares():
    x = Tensor(np.random.default_rng(0).standard_normal(6), requires_grad=True)
    assert gradcheck(lambda: T.tsum(T.mul(x, x)), [x], eps=1e-5) < 1e-8


def test_softmax_scalar():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    w = np.random.default_rng(2).standard_normal((3, 4))
    assert gradcheck(lambda: T.tsum(T.mul(T.softmax_rows(x), w)), [x]) < 1e-6


def test_constant_function_has_zero_error():
    x = Tensor(np.ones(3), requires_grad=True)
    assert gradcheck(lambda: T.tsum(T.mul(x, 0.0)) + 4.0, [x]) == 0.0


def test_detects_a_wrong_gradient():
    x = Tensor(np.array([0.3, -0.8]), requires_grad=True)

    def f():
        out = T.tsum(T.mul(x, x))
        right = out._backward
        out._backward = lambda g: tuple(None if p is None else 1.5 * p for p in right(g))
        return out

    assert gradcheck(f, [x]) > 0.1


def test_skips_relu_kinks():
    x = Tensor(np.array([1e-7, 0.5, -0.5]), requires_grad=True)
    assert gradcheck(lambda: T.tsum(T.relu(x)), [x]) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate_names_the_op():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with pytest.raises(NonFiniteError, match="mul"):
        gradcheck(lambda: T.tsum(T.mul(x, np.inf)), [x])


@pytest.mark.parametrize("case", list(op_cases(0)), ids=lambda c: c[0])
def test_every_op_below_tolerance(case):
    name, f, leaves = case
    assert gradcheck(f, leaves, rng=np.random.default_rng(0)) < 1e-6

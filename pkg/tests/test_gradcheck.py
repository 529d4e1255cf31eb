"""The finite-difference checker itself."""

import numpy as np
import pytest

from skelgru import ops
from skelgru.gradcheck import (
    NondeterministicFunctionError,
    finite_diff_check,
    finite_diff_report,
)
from skelgru.tensor import Tensor


def test_quadratic_passes():
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    err = finite_diff_check(lambda: ops.sum_all(ops.mul(x, x)), x)
    assert err <= 1e-8


def test_unused_param_has_zero_gradient():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([3.0], requires_grad=True)
    err = finite_diff_check(lambda: ops.sum_all(ops.mul(x, x)), unused)
    assert err <= 1e-8


def test_constant_function_passes():
    p = Tensor([2.0], requires_grad=True)
    c = Tensor([1.0, 2.0])
    err = finite_diff_check(lambda: ops.sum_all(c), p)
    assert err == 0.0


def test_eps_range_enforced():
    x = Tensor([1.0], requires_grad=True)
    f = lambda: ops.sum_all(x)  # noqa: E731
    with pytest.raises(ValueError):
        finite_diff_check(f, x, eps=1e-8)
    with pytest.raises(ValueError):
        finite_diff_check(f, x, eps=1e-2)


def test_nondeterministic_forward_detected():
    # distinct coordinate values: two masks agree on the sum only if equal
    x = Tensor(np.arange(1.0, 51.0), requires_grad=True)
    rng = np.random.default_rng(0)  # shared generator: each call draws new masks

    def f():
        return ops.sum_all(ops.dropout(x, 0.5, training=True, rng=rng))

    with pytest.raises(NondeterministicFunctionError):
        finite_diff_check(f, x)


def test_wrong_gradient_is_flagged():
    # sum(x * stop(x)) where stop() hides one factor from the tape:
    # analytic grad is x, true derivative is 2x, so the check must fail.
    x = Tensor([1.0, 2.0], requires_grad=True)

    def f():
        frozen = Tensor(x.data.copy())
        return ops.sum_all(ops.mul(x, frozen))

    err = finite_diff_check(f, x)
    assert err > 0.3


def test_report_covers_all_params():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([[0.5], [0.25]], requires_grad=True)

    def f():
        return ops.sum_all(ops.matmul(ops.reshape(a, (1, 2)), b))

    report = finite_diff_report(f, [("a", a), ("b", b)])
    assert set(report) == {"a", "b"}
    assert all(v <= 1e-8 for v in report.values())

import numpy as np

from convformer import ops
from convformer.gradcheck import grad_check
from convformer.tensor import Tensor, make_result


def test_linear_random_input_passes(rng):
    report = grad_check(ops.linear, [rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)])
    assert report.passed and report.max_error < 1e-8
    assert set(report.errors) == {"input0", "input1", "input2"}


def test_gelu_passes(rng):
    assert grad_check(ops.gelu, [rng.normal(size=12)]).passed


def _bad_square(x: Tensor) -> Tensor:
    """x**2 with a deliberately wrong (halved) gradient."""
    return make_result(x.data ** 2, (x,), lambda g: x._accumulate(g * x.data), "bad_square")


def test_wrong_gradient_is_caught(rng):
    report = grad_check(_bad_square, [rng.normal(size=5)], name="bad")
    assert not report.passed
    assert report.errors["input0"] > 0.4
    assert report.summary().startswith("FAIL bad:")


def test_relu_kink_is_resampled():
    x = np.array([0.0, 1e-4, -2e-4, 0.7, -0.3])
    report = grad_check(ops.relu, [x])
    assert report.resamples >= 1
    assert report.passed


def test_inputs_restored_after_check(rng):
    t = Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=False, name="w")
    before = t.data.copy()
    grad_check(ops.exp, [t])
    assert t.data.dtype == np.float32 and not t.requires_grad and t.grad is None
    np.testing.assert_array_equal(t.data, before)


def test_sampled_entries(rng):
    report = grad_check(ops.exp, [rng.normal(size=(30, 30))], max_entries=20)
    assert report.passed

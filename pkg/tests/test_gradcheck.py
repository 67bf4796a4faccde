import numpy as np

from csilab.gradcheck import grad_check
from csilab.tensor import Tensor, _result, leaky_relu, parameter, square, sum_all


def wrong_square(a):
    # forward x^2, backward claims 3x
    return _result(a.data**2, (a,), "wrong_square", lambda g: (3.0 * a.data * g,))


def test_passes_on_correct_gradients(make_param):
    x = make_param(3, 3)
    report = grad_check(lambda: sum_all(square(x)), [x])
    assert report.passed
    assert report.max_rel_error < 1e-6
    assert len(report.entries) == 9


def test_flags_wrong_gradients(make_param):
    x = make_param(4)
    report = grad_check(lambda: sum_all(wrong_square(x)), {"x": x})
    assert not report.passed
    assert len(report.failures) == 4
    assert report.max_rel_error > 0.1


def test_kink_is_reported_as_nonsmooth():
    x = parameter(np.array([0.0, 1.0, -2.0]))
    report = grad_check(lambda: sum_all(leaky_relu(x, 0.3)), {"x": x})
    assert report.passed
    assert [e.index for e in report.nonsmooth] == [(0,)]


def test_sampling_is_deterministic(make_param):
    x = make_param(10, 10)
    first = grad_check(lambda: sum_all(square(x)), {"x": x}, max_entries=5, seed=3)
    second = grad_check(lambda: sum_all(square(x)), {"x": x}, max_entries=5, seed=3)
    assert len(first.entries) == 5
    assert [e.index for e in first.entries] == [e.index for e in second.entries]


def test_probing_restores_values(make_param):
    x = make_param(2, 3)
    before = x.data.copy()
    grad_check(lambda: sum_all(square(x)), {"x": x})
    np.testing.assert_array_equal(x.data, before)


def test_unnamed_sequence_gets_positional_names():
    x = parameter(np.ones(2))
    report = grad_check(lambda: sum_all(square(x)), [x])
    assert {e.param for e in report.entries} == {"param0"}


def test_constant_input_tensors_are_not_probed():
    x = parameter(np.ones(2))
    c = Tensor(np.full(2, 2.0))
    report = grad_check(lambda: sum_all(square(x - c)), {"x": x})
    assert report.passed and len(report.entries) == 2

"""The finite-difference auditor itself: it must bless correct gradients,
flag broken ones, and respect its own input contract."""

import numpy as np
import pytest

from peft_forge.errors import ConfigError, NumericError
from peft_forge.gradcheck import grad_check
from peft_forge.tensor import Tensor, mul, sum_all, tanh


def test_passes_on_correct_gradients():
    params = {"a": Tensor(np.array([0.3, -0.7, 1.2]), requires_grad=True)}
    report = grad_check(lambda p: sum_all(mul(tanh(p["a"]), p["a"])), params)
    assert report.passed
    assert report.worst <= 1e-6
    assert report.checks[0].n_checked == 3


def test_flags_a_broken_gradient():
    # value is sum(a^2) but the tape only sees one factor, so the analytic
    # gradient comes out as a instead of 2a
    params = {"a": Tensor(np.array([0.5, 1.5]), requires_grad=True)}

    def f(p):
        detached = Tensor(p["a"].data.copy())
        return sum_all(mul(p["a"], detached))

    report = grad_check(f, params)
    assert not report.passed
    assert report.worst > 0.3
    assert "FAIL" in report.format_table()


def test_unused_parameter_counts_as_zero_grad():
    params = {
        "used": Tensor(np.array([1.0, 2.0]), requires_grad=True),
        "idle": Tensor(np.array([3.0]), requires_grad=True),
    }
    report = grad_check(lambda p: sum_all(mul(p["used"], p["used"])), params)
    assert report.passed
    by_name = {c.name: c for c in report.checks}
    assert by_name["idle"].max_rel_err <= 1e-8


def test_max_entries_subsamples():
    params = {"a": Tensor(np.linspace(-1, 1, 50), requires_grad=True)}
    report = grad_check(lambda p: sum_all(mul(p["a"], p["a"])), params, max_entries=7)
    assert report.checks[0].n_checked == 7
    assert report.passed


def test_eps_bounds_enforced():
    params = {"a": Tensor(np.array([1.0]), requires_grad=True)}
    for eps in (1e-8, 1e-2, 0.0):
        with pytest.raises(ConfigError):
            grad_check(lambda p: sum_all(p["a"]), params, eps=eps)


def test_empty_params_rejected():
    with pytest.raises(ConfigError):
        grad_check(lambda p: Tensor(np.array(0.0)), {})


def test_nonscalar_target_rejected():
    params = {"a": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    with pytest.raises(ConfigError):
        grad_check(lambda p: mul(p["a"], p["a"]), params)


def test_nonfinite_target_rejected():
    params = {"a": Tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(NumericError):
        grad_check(lambda p: sum_all(mul(p["a"], Tensor(np.array([np.inf])))), params)


def test_report_table_lists_every_parameter():
    params = {
        "alpha": Tensor(np.array([0.4]), requires_grad=True),
        "beta": Tensor(np.array([0.2, 0.1]), requires_grad=True),
    }
    report = grad_check(lambda p: sum_all(mul(p["alpha"], p["alpha"])) +
                        sum_all(mul(p["beta"], p["beta"])), params)
    table = report.format_table()
    assert "alpha" in table and "beta" in table
    assert report.passed

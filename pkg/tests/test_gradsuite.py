import numpy as np
import pytest

from collabmi import tensor as T
from collabmi.errors import ContractError
from collabmi.gradcheck import finite_difference_check, parameter_check
from collabmi.gradsuite import CHECKS, LOOSE, TIGHT, CheckResult, run_gradient_suite, suite_table


def broken_square(t):
    # value t**2 but a gradient of t instead of 2t
    return T._node(t.data**2, (t,), lambda g: (g * t.data,), "broken")


def test_checker_flags_a_wrong_gradient():
    x = T.tensor(np.array([0.7, -1.3, 2.0]))
    assert finite_difference_check(lambda t: broken_square(t).sum(), x) == pytest.approx(0.5, rel=1e-6)
    assert finite_difference_check(lambda t: (t * t).sum(), x) < 1e-8


def test_checker_subset_and_step_validation():
    x = T.tensor(np.arange(6.0).reshape(2, 3) + 1)
    f = lambda t: broken_square(t).sum()
    assert finite_difference_check(f, x, indices=[1]) == pytest.approx(0.5, rel=1e-6)
    with pytest.raises(ContractError):
        finite_difference_check(f, x, step=0.0)


def test_parameter_check_holds_others_fixed():
    params = {"a": T.parameter(np.array([1.5, 2.0])), "b": T.parameter(np.array([0.5, -1.0]))}
    loss = lambda p: (T.exp(p["a"]) * p["b"]).sum()
    assert parameter_check(loss, params, "a") < 1e-7
    assert parameter_check(loss, params, "b", n_coords=1) < 1e-7


def test_suite_covers_primitives_and_composites():
    for name in ("conv2d_same", "bilinear_warp", "segment_softmax", "encode_warp_fuse_decode", "score_global", "score_local"):
        assert name in CHECKS
    assert CHECKS["linear"][1] == TIGHT and CHECKS["relu"][1] == TIGHT and CHECKS["conv2d_same"][1] == LOOSE


def test_suite_runs_and_tabulates():
    results = run_gradient_suite(seeds=[0], names=["mul", "sigmoid", "segment_sum"])
    assert [r.name for r in results] == ["mul", "sigmoid", "segment_sum"]
    assert all(r.passed for r in results)
    table = suite_table(results + [CheckResult("mul", 1, 1.0, LOOSE)])
    lines = table.splitlines()
    assert len(lines) == 4
    assert lines[1].endswith("FAIL") and lines[2].endswith("pass")

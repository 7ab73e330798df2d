import numpy as np
import pytest

from stereo_unsup.exceptions import InvalidInputError
from stereo_unsup.gradcheck import LOSS_NAMES, finite_diff_check, random_problem, relative_error


@pytest.fixture(scope="module")
def problem():
    return random_problem(seed=2)


def test_smooth_on_random_field(problem):
    left, right, d, _ = problem
    res = finite_diff_check("sm", left, right, d)
    assert res.n_checked >= 200 and res.max_rel_error < 1e-4 and res.passed


def test_ap_pure_l1(problem):
    left, right, d, back = problem
    res = finite_diff_check("ap", left, right, d, d_back=back, alpha=0.0)
    assert res.n_checked >= 200 and res.max_rel_error < 1e-3


@pytest.mark.parametrize("loss", LOSS_NAMES)
def test_every_loss_within_tolerance(problem, loss):
    left, right, d, back = problem
    res = finite_diff_check(loss, left, right, d, d_back=back)
    assert res.passed, res.to_dict()


def test_constant_case_reports_zero():
    img = np.full((24, 24, 1), 0.5)
    d = np.full((24, 24), 1.3)
    for loss in ("ap", "sm"):
        res = finite_diff_check(loss, img, img, d, n_samples=50)
        assert res.max_rel_error == 0.0


def test_relative_error_convention():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(1.0, 2.0) == pytest.approx(0.5)


def test_detects_wrong_gradient(problem, monkeypatch):
    import stereo_unsup.gradcheck as gc

    left, right, d, _ = problem
    real = gc.loss_smooth
    monkeypatch.setattr(gc, "loss_smooth", lambda field, img: (real(field, img)[0], 1.1 * real(field, img)[1]))
    assert not finite_diff_check("sm", left, right, d, n_samples=20).passed


def test_rejects_bad_arguments(problem):
    left, right, d, _ = problem
    with pytest.raises(InvalidInputError):
        finite_diff_check("tv", left, right, d)
    with pytest.raises(InvalidInputError):
        finite_diff_check("sm", left, right, d, h=0.0)

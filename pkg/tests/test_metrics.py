import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stereo_unsup.exceptions import DimensionMismatchError, InvalidInputError
from stereo_unsup.metrics import MetricReport, d1, epe, error_map, evaluate

fields = arrays(np.float64, (8, 8), elements=st.floats(-50, 50))


def test_epe_examples(rng):
    gt = rng.uniform(0, 10, (10, 10))
    assert epe(gt, gt) == 0.0
    assert epe(gt + 2, gt) == pytest.approx(2.0)
    d = gt.copy()
    d[:5] += 1
    assert epe(d, gt) == pytest.approx(0.5)


def test_d1_examples(rng):
    gt = rng.uniform(0, 10, (10, 10))
    assert d1(gt, gt) == 0.0
    assert d1(gt + 5, gt) == 1.0
    d = gt.copy()
    d.flat[rng.choice(100, 10, replace=False)] += 4
    assert d1(d, gt) == pytest.approx(0.10)


def test_d1_threshold_is_strict():
    gt = np.zeros((4, 4))
    assert d1(gt + 3.0, gt) == 0.0


def test_error_map_examples():
    gt = np.zeros((6, 6))
    assert not error_map(gt, gt).any()
    assert np.all(error_map(gt + 5, gt) == 1.0)
    np.testing.assert_allclose(error_map(gt + 2.5, gt), 0.5)
    assert np.all(error_map(gt + 50, gt) == 1.0)
    valid = np.zeros((6, 6), bool)
    valid[:3] = True
    m = error_map(gt + 2.5, gt, valid)
    assert m.shape == (6, 6, 1) and not m[3:].any()


def test_empty_mask_raises():
    with pytest.raises(InvalidInputError):
        epe(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))
    with pytest.raises(InvalidInputError):
        d1(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        epe(np.zeros((4, 4)), np.zeros((4, 5)))


def test_epe_matches_loop_oracle(rng):
    d, gt = rng.normal(size=(9, 11)), rng.normal(size=(9, 11))
    valid = rng.random((9, 11)) < 0.6
    total, n = 0.0, 0
    for (r, c), v in np.ndenumerate(valid):
        if v:
            total += abs(d[r, c] - gt[r, c])
            n += 1
    assert epe(d, gt, valid) == pytest.approx(total / n, rel=1e-12)


@given(fields, fields, st.floats(-100, 100))
def test_epe_translation_covariant(d, gt, c):
    assert epe(d + c, gt + c) == pytest.approx(epe(d, gt), abs=1e-9)


@given(fields, fields)
def test_epe_symmetric(d, gt):
    assert epe(d, gt) == epe(gt, d)


@given(fields, fields, st.floats(0, 20), st.floats(0, 20))
def test_d1_monotone_in_threshold(d, gt, a, b):
    lo, hi = sorted((a, b))
    assert d1(d, gt, threshold=lo) >= d1(d, gt, threshold=hi)
    assert 0.0 <= d1(d, gt, threshold=lo) <= 1.0


def test_evaluate_regions(rng, tmp_path):
    gt = rng.uniform(0, 8, (10, 10))
    d = gt.copy()
    occ = np.zeros((10, 10), bool)
    occ[:, :2] = True
    d[occ] += 4
    report = evaluate(d, gt, occlusion=occ)
    assert report.regions["non_occluded"].epe == 0.0
    assert report.regions["occluded"].d1 == 1.0
    assert report.regions["occluded"].pixels == 20
    assert report.epe == pytest.approx(0.8)
    path = tmp_path / "m.json"
    report.save(str(path))
    again = MetricReport.load(str(path))
    assert again == report
    assert "3.0 px" in report.to_dict()["d1_definition"]

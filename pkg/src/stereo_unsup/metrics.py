"""Disparity accuracy: end-point error, D1 outlier rate and error maps."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .validation import check_field, check_mask, check_same_hw, tiled_mean

D1_THRESHOLD = 3.0  # absolute pixels, no relative clause
ERROR_MAP_CAP = 5.0


def _abs_error(disp, gt, valid):
    disp = check_field(disp)
    gt = check_field(gt, "gt")
    check_same_hw(disp, gt, names=("disparity", "gt"))
    valid = np.ones(gt.shape, bool) if valid is None else check_mask(valid, gt.shape, "valid")
    return np.abs(disp - gt), valid


def _masked_mean(values, valid):
    n = int(valid.sum())
    if n == 0:
        raise InvalidInputError("valid mask is empty")
    return tiled_mean(np.where(valid, values, 0.0), count=n)


def epe(disp, gt, valid=None):
    """Mean absolute disparity error over valid pixels."""
    err, valid = _abs_error(disp, gt, valid)
    return _masked_mean(err, valid)


def d1(disp, gt, valid=None, threshold=D1_THRESHOLD):
    """Fraction of valid pixels whose error exceeds ``threshold`` pixels."""
    err, valid = _abs_error(disp, gt, valid)
    return _masked_mean((err > threshold).astype(np.float64), valid)


def error_map(disp, gt, valid=None, cap=ERROR_MAP_CAP):
    """``|d - gt| / cap`` clipped to [0, 1]; invalid pixels are 0. Returns ``(H, W, 1)``."""
    if cap <= 0:
        raise InvalidInputError("cap must be positive")
    err, valid = _abs_error(disp, gt, valid)
    return (np.clip(err / cap, 0.0, 1.0) * valid)[:, :, None]


@dataclass
class RegionMetrics:
    epe: float
    d1: float
    pixels: int


@dataclass
class MetricReport:
    epe: float
    d1: float
    pixels: int
    d1_threshold: float = D1_THRESHOLD
    regions: dict = field(default_factory=dict)  # name -> RegionMetrics

    def to_dict(self):
        out = asdict(self)
        out["d1_definition"] = f"fraction of valid pixels with |d - gt| > {self.d1_threshold} px (absolute)"
        return out

    @classmethod
    def from_dict(cls, data):
        regions = {k: RegionMetrics(**v) for k, v in data.get("regions", {}).items()}
        return cls(float(data["epe"]), float(data["d1"]), int(data["pixels"]),
                   float(data.get("d1_threshold", D1_THRESHOLD)), regions)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _region(disp, gt, mask, threshold):
    n = int(mask.sum())
    if n == 0:
        return RegionMetrics(0.0, 0.0, 0)
    return RegionMetrics(epe(disp, gt, mask), d1(disp, gt, mask, threshold), n)


def evaluate(disp, gt, valid=None, occlusion=None, threshold=D1_THRESHOLD):
    """Overall metrics plus an occluded / non-occluded split when ``occlusion`` is given."""
    _, valid = _abs_error(disp, gt, valid)
    report = MetricReport(epe(disp, gt, valid), d1(disp, gt, valid, threshold), int(valid.sum()), threshold)
    if occlusion is not None:
        occ = check_mask(occlusion, valid.shape, "occlusion")
        report.regions = {"non_occluded": _region(disp, gt, valid & ~occ, threshold),
                          "occluded": _region(disp, gt, valid & occ, threshold)}
    return report

"""Central finite-difference verification of the analytic loss gradients."""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .cbem import HUBER_BETA, loss_self_sup
from .exceptions import InvalidInputError
from .imaging import warp_with_disparity
from .losses import detect_occlusion, loss_ap, loss_census, loss_smooth, soft_census
from .validation import check_field, check_image, check_same_hw

LOSS_NAMES = ("ap", "census", "sm", "selfsup")
TOLERANCES = {"ap": 1e-3, "census": 1e-3, "sm": 1e-4, "selfsup": 1e-3}
DEFAULT_STEP = 1e-3


@dataclass
class GradCheckResult:
    loss: str
    max_rel_error: float
    n_checked: int
    step: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def to_dict(self):
        return {"loss": self.loss, "max_rel_error": self.max_rel_error, "n_checked": self.n_checked,
                "step": self.step, "tolerance": self.tolerance, "passed": bool(self.passed)}


def random_problem(seed=0, size=32, max_disp=3.0):
    """Smooth random pair plus random forward/backward fields for gradient checks."""
    rng = np.random.default_rng(seed)

    def texture():
        t = gaussian_filter(rng.random((size, size)), 1.0)
        t = (t - t.min()) / (t.max() - t.min())
        return (0.1 + 0.8 * t)[:, :, None]

    left, right = texture(), texture()
    d = gaussian_filter(rng.uniform(0.0, max_disp, (size, size)), 1.5) + rng.uniform(-0.3, 0.3, (size, size))
    back = -d + rng.uniform(-0.5, 0.5, (size, size))
    return left, right, d, back


def _photometric(kind, left, right, occlusion, alpha):
    census_l = soft_census(left) if kind == "census" else None

    def f(d):
        warped, deriv = warp_with_disparity(right, d, return_derivative=True)
        if kind == "ap":
            value, g = loss_ap(left, warped, occlusion, alpha)
        else:
            value, g = loss_census(left, warped, occlusion, census_l)
        return value, np.sum(g * deriv, axis=2)

    return f


def _eligible(kind, d, h, target=None, avoid_kinks=True):
    """Pixels away from the image border and from non-smooth points of the loss."""
    rows, cols = d.shape
    ok = np.zeros(d.shape, bool)
    ok[1:-1, 1:-1] = True
    if not avoid_kinks:
        return ok
    if kind in ("ap", "census"):
        x = np.arange(cols)[None, :] - d
        frac = x - np.floor(x)
        ok &= (frac >= 0.1) & (frac <= 0.9) & (x > 1.0) & (x < cols - 2.0)
    elif kind == "sm":
        # every difference touching the pixel must stay clear of |.| = 0
        near = 2.0 * h
        dx = np.abs(np.diff(d, axis=1))
        dy = np.abs(np.diff(d, axis=0))
        bad = np.zeros(d.shape, bool)
        bad[:, :-1] |= dx < near
        bad[:, 1:] |= dx < near
        bad[:-1, :] |= dy < near
        bad[1:, :] |= dy < near
        ok &= ~bad
    elif kind == "selfsup":
        ok &= np.abs(np.abs(target - d) - HUBER_BETA) > 2.0 * h
    return ok


def relative_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|)`` elementwise, with ``0 / 0`` taken as 0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    out = np.zeros(np.broadcast(analytic, numeric).shape)
    nz = denom > 0
    out[nz] = np.abs(analytic - numeric)[nz] / denom[nz]
    return out


def finite_diff_check(loss, left, right, d, n_samples=200, h=DEFAULT_STEP, seed=0, d_back=None,
                      tau=1.0, alpha=0.85, avoid_kinks=True, target=None, mask=None):
    """Compare a loss term's analytic disparity gradient with central differences.

    Args:
        loss: one of ``"ap"``, ``"census"``, ``"sm"``, ``"selfsup"``.
        left, right: image pair (``right`` is warped by ``d``).
        d: disparity field where the gradient is checked.
        n_samples: pixels to probe, drawn without replacement from the eligible set.
        h: finite-difference step in pixels.
        d_back: backward field for the occlusion mask (default ``-d``); the mask is
            held fixed, as during one optimiser step.
        target, mask: self-supervision target and reliability mask (default: a
            seeded perturbation of ``d`` and an all-ones mask).

    Returns:
        :class:`GradCheckResult` with the largest relative error over probed pixels.
    """
    if loss not in LOSS_NAMES:
        raise InvalidInputError(f"unknown loss {loss!r}; choose from {', '.join(LOSS_NAMES)}")
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    left = check_image(left, name="left")
    right = check_image(right, name="right")
    d = check_field(d)
    check_same_hw(left, right, d, names=("left", "right", "disparity"))
    rng = np.random.default_rng(seed)

    if loss in ("ap", "census"):
        back = -d if d_back is None else check_field(d_back, "d_back")
        f = _photometric(loss, left, right, detect_occlusion(d, back, tau), alpha)
    elif loss == "sm":
        def f(field):
            return loss_smooth(field, left)
    else:
        if target is None:
            target = d + rng.uniform(-2.0, 2.0, d.shape)
        mask = np.ones(d.shape, bool) if mask is None else mask

        def f(field):
            return loss_self_sup(field, target, mask)

    _, grad = f(d)
    candidates = np.flatnonzero(_eligible(loss, d, h, target, avoid_kinks))
    picks = rng.choice(candidates, size=min(n_samples, candidates.size), replace=False) if candidates.size else []
    worst = 0.0
    for flat in np.sort(np.asarray(picks, dtype=np.intp)):
        r, c = divmod(int(flat), d.shape[1])
        plus = d.copy()
        minus = d.copy()
        plus[r, c] += h
        minus[r, c] -= h
        numeric = (f(plus)[0] - f(minus)[0]) / (2.0 * h)
        worst = max(worst, float(relative_error(grad[r, c], numeric)))
    return GradCheckResult(loss, worst, len(picks), h, TOLERANCES[loss])

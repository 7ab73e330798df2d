"""Per-scale unsupervised stereo loss with analytic gradients.

Every ``loss_*`` function returns ``(value, gradient)``. Photometric terms
return the gradient with respect to the warped image; :func:`scale_loss` chains
it through the warp into the disparity field.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .cost_volume import CENSUS_OFFSETS, CENSUS_RADIUS
from .exceptions import DimensionMismatchError, InvalidInputError
from .imaging import bilinear_sample, image_gradients, warp_with_disparity
from .validation import check_field, check_image, check_same_hw, tiled_mean

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SOFT_CENSUS_EPS = 0.09
SOFT_HAMMING_EPS = 0.1
SOFT_CENSUS_BITS = len(CENSUS_OFFSETS)
CHARBONNIER_EPS = 1e-3
CHARBONNIER_POWER = 0.45


@dataclass
class LossWeights:
    lambda_ap: float = 1.0
    lambda_census: float = 1.0
    lambda_sm: float = 0.1
    alpha: float = 0.85
    tau_levels: tuple = (5.0, 2.0, 1.0)

    def __post_init__(self):
        self.tau_levels = tuple(float(t) for t in self.tau_levels)
        if min(self.lambda_ap, self.lambda_census, self.lambda_sm) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in [0, 1]")
        if len(self.tau_levels) != 3 or min(self.tau_levels) <= 0:
            raise InvalidInputError("tau_levels needs three positive thresholds")

    def tau_for_level(self, level):
        """Threshold for pyramid level ``level``; ``tau_levels`` is listed finest first."""
        return self.tau_levels[level]

    def scaled(self, factor):
        return LossWeights(self.lambda_ap * factor, self.lambda_census * factor,
                           self.lambda_sm * factor, self.alpha, self.tau_levels)

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise InvalidInputError(f"unknown loss weight keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        out = asdict(self)
        out["tau_levels"] = list(self.tau_levels)
        return out


@dataclass
class LossReport:
    """Per-scale term values, weighted total and per-scale disparity gradients."""

    terms: list  # one {"ap", "census", "sm"} dict per scale, finest first
    weights: LossWeights
    grads: list = field(default_factory=list)

    @property
    def scale_totals(self):
        w = self.weights
        return [w.lambda_ap * t["ap"] + w.lambda_census * t["census"] + w.lambda_sm * t["sm"]
                for t in self.terms]

    @property
    def total(self):
        return float(sum(self.scale_totals))

    @property
    def grad(self):
        """Gradient of the total with respect to the full-resolution disparity."""
        return self.grads[0] if self.grads else None

    def to_dict(self):
        return {"total": self.total, "terms": self.terms}


# ------------------------------------------------------------------ occlusion

def detect_occlusion(d_forward, d_backward, tau):
    """Forward-backward consistency mask; ``True`` marks occluded pixels.

    A pixel is visible iff ``(d_f + d_b(c - d_f))**2 < tau`` with ``d_b`` sampled
    bilinearly, and its forward-mapped column stays inside the frame.
    """
    d_forward = check_field(d_forward, "d_forward")
    d_backward = check_field(d_backward, "d_backward")
    check_same_hw(d_forward, d_backward, names=("d_forward", "d_backward"))
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    h, w = d_forward.shape
    x = np.arange(w, dtype=np.float64)[None, :] - d_forward
    y = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    back = bilinear_sample(d_backward, x, y)[:, :, 0]
    residual = (d_forward + back) ** 2
    out_of_frame = (x < 0.0) | (x > w - 1)
    return (residual >= tau) | out_of_frame


# ----------------------------------------------------------------------- SSIM

def _box_mean(x):
    return uniform_filter(x, size=(3, 3, 1), mode="constant")


class _Ssim:
    """SSIM map with the intermediate statistics kept for the backward pass."""

    def __init__(self, a, b):
        self.a, self.b = a, b
        ones = np.ones(a.shape[:2] + (1,))
        self.count = _box_mean(ones)
        mean = lambda x: _box_mean(x) / self.count  # noqa: E731
        self.mu_a, self.mu_b = mean(a), mean(b)
        var_a = mean(a * a) - self.mu_a ** 2
        var_b = mean(b * b) - self.mu_b ** 2
        cov = mean(a * b) - self.mu_a * self.mu_b
        self.num1 = 2 * self.mu_a * self.mu_b + SSIM_C1
        self.num2 = 2 * cov + SSIM_C2
        self.den1 = self.mu_a ** 2 + self.mu_b ** 2 + SSIM_C1
        self.den2 = var_a + var_b + SSIM_C2
        self.value = self.num1 * self.num2 / (self.den1 * self.den2)

    def backward_b(self, upstream):
        """Gradient with respect to ``b`` given ``d loss / d ssim`` per pixel."""
        s, den = self.value, self.den1 * self.den2
        mu_a, mu_b = self.mu_a, self.mu_b
        d_mu_b = (2 * mu_a * self.num2 - 2 * mu_a * self.num1) / den - s * (2 * mu_b / self.den1 - 2 * mu_b / self.den2)
        d_p_ab = 2 * self.num1 / den
        d_p_bb = -s / self.den2
        adj = lambda g: _box_mean(g / self.count)  # noqa: E731
        return (adj(upstream * d_mu_b)
                + self.a * adj(upstream * d_p_ab)
                + 2 * self.b * adj(upstream * d_p_bb))


def ssim_map(a, b):
    """Local SSIM per pixel and channel, 3x3 uniform window (border windows shrink)."""
    a = check_image(a, name="a")
    b = check_image(b, name="b")
    if a.shape != b.shape:
        raise DimensionMismatchError(f"ssim inputs differ: {a.shape} vs {b.shape}")
    return _Ssim(a, b).value


# ------------------------------------------------------------------- L_ap

def _visible(occlusion, shape):
    occ = np.asarray(occlusion)
    if occ.shape != tuple(shape[:2]):
        raise DimensionMismatchError(f"occlusion mask {occ.shape} does not match image {shape[:2]}")
    return 1.0 - occ.astype(np.float64)


def loss_ap(img_left, img_warp, occlusion, alpha=0.85):
    """Masked SSIM + L1 appearance loss and its gradient with respect to ``img_warp``."""
    img_left = check_image(img_left, name="img_left")
    img_warp = check_image(img_warp, name="img_warp")
    if img_left.shape != img_warp.shape:
        raise DimensionMismatchError(f"image shapes differ: {img_left.shape} vs {img_warp.shape}")
    vis = _visible(occlusion, img_left.shape)[:, :, None]
    a = img_left * vis
    b = img_warp * vis
    n = a.size
    ssim = _Ssim(a, b)
    diff = a - b
    per_pixel = alpha * (1.0 - ssim.value) / 2.0 + (1.0 - alpha) * np.abs(diff)
    value = tiled_mean(per_pixel)
    grad_b = ssim.backward_b(np.full(a.shape, -alpha / (2.0 * n)))
    grad_b -= (1.0 - alpha) * np.sign(diff) / n
    return value, grad_b * vis


# --------------------------------------------------------------- L_census

def _soft_sign(delta):
    return delta / np.sqrt(delta * delta + SOFT_CENSUS_EPS)


def _soft_sign_and_prime(delta):
    inv = 1.0 / np.sqrt(delta * delta + SOFT_CENSUS_EPS)
    phi = delta * inv
    inv *= inv * inv
    inv *= SOFT_CENSUS_EPS
    return phi, inv


def _neighbour_deltas(gray):
    r = CENSUS_RADIUS
    h, w = gray.shape
    padded = np.pad(gray, r, mode="edge")
    return np.stack([padded[r + dy:r + dy + h, r + dx:r + dx + w] - gray for dy, dx in CENSUS_OFFSETS])


def soft_census(img):
    """Differentiable census: ``(48, H, W)`` soft signs of neighbour minus centre."""
    gray = check_image(img).mean(axis=2)
    return _soft_sign(_neighbour_deltas(gray))


def _fold_edge_pad(grad_padded, r):
    """Adjoint of ``np.pad(x, r, mode='edge')`` for 2-D arrays."""
    g = grad_padded.copy()
    g[:, r] += g[:, :r].sum(axis=1)
    g[:, -r - 1] += g[:, -r:].sum(axis=1)
    g = g[:, r:-r]
    g[r] += g[:r].sum(axis=0)
    g[-r - 1] += g[-r:].sum(axis=0)
    return g[r:-r]


def charbonnier(x):
    return (x * x + CHARBONNIER_EPS ** 2) ** CHARBONNIER_POWER


def _charbonnier_prime(x):
    return 2 * CHARBONNIER_POWER * x * (x * x + CHARBONNIER_EPS ** 2) ** (CHARBONNIER_POWER - 1)


def loss_census(img_left, img_warp, occlusion, left_census=None):
    """Charbonnier-penalised soft Hamming distance between census descriptors.

    ``left_census`` may carry a precomputed :func:`soft_census` of ``img_left``.
    Returns the masked mean and its gradient with respect to ``img_warp``.
    """
    img_left = check_image(img_left, name="img_left")
    img_warp = check_image(img_warp, name="img_warp")
    if img_left.shape != img_warp.shape:
        raise DimensionMismatchError(f"image shapes differ: {img_left.shape} vs {img_warp.shape}")
    vis = _visible(occlusion, img_left.shape)
    h, w, channels = img_warp.shape
    n = h * w
    phi_l = soft_census(img_left) if left_census is None else left_census
    gray = img_warp.mean(axis=2)
    phi_w, phi_w_prime = _soft_sign_and_prime(_neighbour_deltas(gray))
    diff = np.subtract(phi_l, phi_w, out=phi_w)
    inv_den = diff * diff
    inv_den += SOFT_HAMMING_EPS
    np.reciprocal(inv_den, out=inv_den)
    dist = SOFT_CENSUS_BITS - SOFT_HAMMING_EPS * inv_den.sum(axis=0)
    value = tiled_mean(charbonnier(dist) * vis, n)

    # backward: d value / d phi_w, then through the soft sign into neighbour/centre pixels
    outer = _charbonnier_prime(dist) * vis * (-2.0 * SOFT_HAMMING_EPS / n)
    g_delta = inv_den
    g_delta *= inv_den
    g_delta *= diff
    g_delta *= phi_w_prime
    g_delta *= outer
    r = CENSUS_RADIUS
    grad_padded = np.zeros((h + 2 * r, w + 2 * r))
    for k, (dy, dx) in enumerate(CENSUS_OFFSETS):
        grad_padded[r + dy:r + dy + h, r + dx:r + dx + w] += g_delta[k]
    grad_gray = _fold_edge_pad(grad_padded, r) - g_delta.sum(axis=0)
    return value, np.repeat(grad_gray[:, :, None] / channels, channels, axis=2)


# ------------------------------------------------------------------- L_sm

def loss_smooth(disp, img):
    """Edge-aware smoothness ``|dx d| exp(-|dx I|) + |dy d| exp(-|dy I|)`` averaged over pixels."""
    disp = check_field(disp)
    img = check_image(img)
    check_same_hw(disp, img, names=("disp", "img"))
    gx, gy = image_gradients(img)
    wx, wy = np.exp(-np.abs(gx)), np.exp(-np.abs(gy))
    ddx = np.zeros_like(disp)
    ddy = np.zeros_like(disp)
    ddx[:, :-1] = disp[:, 1:] - disp[:, :-1]
    ddy[:-1, :] = disp[1:, :] - disp[:-1, :]
    n = disp.size
    value = tiled_mean(np.abs(ddx) * wx + np.abs(ddy) * wy)
    tx = np.sign(ddx) * wx / n
    ty = np.sign(ddy) * wy / n
    grad = np.zeros_like(disp)
    grad[:, 1:] += tx[:, :-1]
    grad[:, :-1] -= tx[:, :-1]
    grad[1:, :] += ty[:-1, :]
    grad[:-1, :] -= ty[:-1, :]
    return value, grad


# --------------------------------------------------------------- per scale

def scale_loss(img_left, img_right, disp, disp_back, weights, tau, left_census=None, occlusion=None):
    """Weighted single-scale loss for the left-referenced field ``disp``.

    Returns ``(terms, grad, occlusion)`` where ``grad`` is the gradient of
    ``lambda_ap*ap + lambda_census*census + lambda_sm*sm`` with respect to ``disp``.
    The occlusion mask is held constant.
    """
    if occlusion is None:
        occlusion = detect_occlusion(disp, disp_back, tau)
    warped, dwarp = warp_with_disparity(img_right, disp, return_derivative=True)
    ap, g_ap = loss_ap(img_left, warped, occlusion, weights.alpha)
    cen, g_cen = loss_census(img_left, warped, occlusion, left_census)
    sm, g_sm = loss_smooth(disp, img_left)
    g_img = weights.lambda_ap * g_ap + weights.lambda_census * g_cen
    grad = (g_img * dwarp).sum(axis=2) + weights.lambda_sm * g_sm
    return {"ap": ap, "census": cen, "sm": sm}, grad, occlusion


def total_unsup_loss(pyr_left, pyr_right, disparities, back_disparities, weights=None):
    """Sum of the per-scale losses over the three pyramid levels (finest first)."""
    weights = LossWeights() if weights is None else weights
    n_levels = len(pyr_left)
    if not (len(pyr_right) == len(disparities) == len(back_disparities) == n_levels):
        raise DimensionMismatchError("pyramids and disparity lists must have the same number of levels")
    terms, grads = [], []
    for level in range(n_levels):
        check_same_hw(pyr_left[level], pyr_right[level], disparities[level], back_disparities[level],
                      names=(f"left[{level}]", f"right[{level}]", f"disp[{level}]", f"back[{level}]"))
        t, g, _ = scale_loss(pyr_left[level], pyr_right[level], disparities[level], back_disparities[level],
                             weights, weights.tau_for_level(level))
        terms.append(t)
        grads.append(g)
    return LossReport(terms, weights, grads)

"""Error prediction from matching confidence and left-right reconstruction error.

A small per-pixel scorer maps initial uncertainty and LR error features to an
uncertainty score in (0, 1). Reliable pixels (low score) then let the
full-resolution disparity supervise the coarse levels.
"""
import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import roc_auc_score

from .exceptions import InvalidInputError, SingleClassError
from .cost_volume import next_range
from .imaging import build_pyramid, downsample_field, downsample_map, warp_with_disparity
from .refine import LevelState, RefineResult, refine_level
from .validation import check_field, check_image, check_mask, check_same_hw

ERROR_THRESHOLD = 1.0
HUBER_BETA = 1.0
DEFAULT_MASK_THRESHOLD = 0.5
MIN_TRAIN_PIXELS = 1000
PARAMS_FORMAT = "cbem-mlp-v1"


@dataclass
class ErrorLabels:
    labels: np.ndarray  # uint8, 1 where |gt - d| > 1 px
    valid: np.ndarray  # bool


def lr_error(img_left, img_right, disp_left):
    """Signed reconstruction error ``warp(I_r, d_l) - I_l`` per channel, shape ``(H, W, C)``."""
    img_left = check_image(img_left, name="left")
    img_right = check_image(img_right, name="right")
    disp_left = check_field(disp_left)
    check_same_hw(img_left, img_right, disp_left, names=("left", "right", "disparity"))
    if img_left.shape != img_right.shape:
        raise InvalidInputError("left and right channel counts differ")
    return warp_with_disparity(img_right, disp_left) - img_left


def make_labels(gt, disp, valid=None):
    """Binary error labels: 1 where ``|gt - disp| > 1`` (strict) on valid pixels, else 0."""
    gt = check_field(gt, "gt")
    disp = check_field(disp)
    check_same_hw(gt, disp, names=("gt", "disparity"))
    valid = np.ones(gt.shape, bool) if valid is None else check_mask(valid, gt.shape, "valid")
    labels = ((np.abs(gt - disp) > ERROR_THRESHOLD) & valid).astype(np.uint8)
    return ErrorLabels(labels, valid)


def build_features(img_left, img_right, disp, sigma, half_span):
    """Per-pixel feature stack ``(H, W, F)``.

    Channels: normalised sigma, ``|E_LR|`` per image channel, signed mean of
    ``E_LR``, and 3x3 means of normalised sigma and of mean ``|E_LR|``.

    Args:
        img_left, img_right: the pair the disparity was estimated on.
        disp: left-referenced disparity.
        sigma: matching spread, same grid as ``disp``.
        half_span: scalar or per-pixel half width of the hypothesis range;
            values below 0.5 are raised to 0.5.
    """
    sigma = check_field(sigma, "sigma")
    if np.any(sigma < 0):
        raise InvalidInputError("sigma must be non-negative")
    err = lr_error(img_left, img_right, disp)
    check_same_hw(err, sigma, names=("disparity", "sigma"))
    half_span = np.maximum(np.broadcast_to(np.asarray(half_span, dtype=np.float64), sigma.shape), 0.5)
    sig = sigma / half_span
    abs_err = np.abs(err)
    abs_mean = abs_err.mean(axis=2)
    channels = [sig, *np.moveaxis(abs_err, 2, 0), err.mean(axis=2),
                uniform_filter(sig, 3, mode="nearest"), uniform_filter(abs_mean, 3, mode="nearest")]
    return np.stack(channels, axis=-1)


def result_features(img_left, img_right, result):
    """Features for the full-resolution output of a :class:`RefineResult`."""
    finest = result.levels[0]
    half_span = 0.5 * (finest.bounds.d_max - finest.bounds.d_min)
    return build_features(img_left, img_right, result.disparity, finest.sigma, half_span)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(p, y):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _flatten(features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    if x.ndim != 2:
        raise InvalidInputError(f"features must be (n, F) or (H, W, F), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("features contain non-finite values")
    return x


class CBEMClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer per-pixel error scorer (tanh hidden layer, sigmoid output).

    Inputs are standardised with training statistics. Training is seeded
    mini-batch SGD with momentum on mean binary cross-entropy.
    """

    def __init__(self, hidden=16, epochs=1, batch_size=256, learning_rate=0.1, momentum=0.9, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def _init_params(self, n_features, rng):
        self.mean_ = np.zeros(n_features)
        self.scale_ = np.ones(n_features)
        self.w1_ = rng.normal(0.0, 1.0 / np.sqrt(n_features), (n_features, self.hidden))
        self.b1_ = np.zeros(self.hidden)
        self.w2_ = rng.normal(0.0, 1.0 / np.sqrt(self.hidden), self.hidden)
        self.b2_ = 0.0

    def _forward(self, z):
        hidden = np.tanh(z @ self.w1_ + self.b1_)
        return hidden, _sigmoid(hidden @ self.w2_ + self.b2_)

    def fit(self, X, y):
        x = _flatten(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != x.shape[0]:
            raise InvalidInputError(f"{x.shape[0]} feature rows but {y.size} labels")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("labels must be 0 or 1")
        if x.shape[0] < MIN_TRAIN_PIXELS:
            raise InvalidInputError(f"need at least {MIN_TRAIN_PIXELS} labelled pixels, got {x.shape[0]}")
        if y.min() == y.max():
            raise SingleClassError(f"training labels are all {int(y[0])}; cross-entropy is degenerate")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidInputError("epochs, batch_size and learning_rate must be positive")

        rng = np.random.default_rng(self.seed)
        self._init_params(x.shape[1], rng)
        self.mean_ = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        z = (x - self.mean_) / self.scale_
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = x.shape[1]
        self.initial_loss_ = _bce(self._forward(z)[1], y)

        velocity = [np.zeros_like(self.w1_), np.zeros_like(self.b1_), np.zeros_like(self.w2_), 0.0]
        for _ in range(self.epochs):
            order = rng.permutation(x.shape[0])
            for start in range(0, order.size, self.batch_size):
                idx = order[start:start + self.batch_size]
                zb, yb = z[idx], y[idx]
                hidden, p = self._forward(zb)
                dlogit = (p - yb) / idx.size
                dhidden = np.outer(dlogit, self.w2_) * (1.0 - hidden ** 2)
                grads = [zb.T @ dhidden, dhidden.sum(axis=0), hidden.T @ dlogit, float(dlogit.sum())]
                for k, g in enumerate(grads):
                    velocity[k] = self.momentum * velocity[k] - self.learning_rate * g
                self.w1_ += velocity[0]
                self.b1_ += velocity[1]
                self.w2_ += velocity[2]
                self.b2_ += velocity[3]
        self.final_loss_ = _bce(self._forward(z)[1], y)
        return self

    def _check_fitted(self):
        if not hasattr(self, "w1_"):
            raise InvalidInputError("CBEMClassifier is not fitted")

    def decision_function(self, X):
        self._check_fitted()
        x = _flatten(X)
        if x.shape[1] != self.w1_.shape[0]:
            raise InvalidInputError(f"expected {self.w1_.shape[0]} features, got {x.shape[1]}")
        hidden = np.tanh(((x - self.mean_) / self.scale_) @ self.w1_ + self.b1_)
        return hidden @ self.w2_ + self.b2_

    def predict_proba(self, X):
        p = np.clip(_sigmoid(self.decision_function(X)), 1e-12, 1.0 - 1e-12)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def loss(self, X, y):
        return _bce(self.predict_proba(X)[:, 1], np.asarray(y, dtype=np.float64).reshape(-1))

    # ------------------------------------------------------------ persistence

    def params_dict(self):
        self._check_fitted()

        def tagged(a):
            a = np.asarray(a, dtype=np.float64)
            return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}

        return {
            "format": PARAMS_FORMAT,
            "hyper": self.get_params(),
            "arrays": {name: tagged(getattr(self, name + "_"))
                       for name in ("mean", "scale", "w1", "b1", "w2", "b2")},
        }

    @classmethod
    def from_params_dict(cls, data):
        if data.get("format") != PARAMS_FORMAT:
            raise InvalidInputError(f"unknown predictor format {data.get('format')!r}")
        model = cls(**data.get("hyper", {}))
        for name, entry in data["arrays"].items():
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"predictor parameter {name} is not finite")
            setattr(model, name + "_", float(arr) if arr.ndim == 0 else arr)
        model.classes_ = np.array([0, 1])
        model.n_features_in_ = model.w1_.shape[0]
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.params_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_params_dict(json.load(fh))


def zero_predictor(n_features, hidden=16):
    """Predictor with all weights and biases zero (scores 0.5 everywhere)."""
    model = CBEMClassifier(hidden=hidden)
    model._init_params(n_features, np.random.default_rng(0))
    model.w1_[:] = 0.0
    model.w2_[:] = 0.0
    model.classes_ = np.array([0, 1])
    model.n_features_in_ = n_features
    return model


def predict_uscore(features, model):
    """Uncertainty score map in (0, 1) for an ``(H, W, F)`` feature stack."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise InvalidInputError(f"features must be (H, W, F), got {features.shape}")
    return model.predict_proba(features)[:, 1].reshape(features.shape[:2])


def reliability_mask(uscore, t=DEFAULT_MASK_THRESHOLD):
    """True where ``uscore < t``."""
    if not 0.0 < t < 1.0:
        raise InvalidInputError("threshold must lie in (0, 1)")
    return np.asarray(uscore, dtype=np.float64) < t


def huber(x, beta=HUBER_BETA):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def loss_self_sup(d_coarse, d_target, mask, beta=HUBER_BETA):
    """Masked Huber loss of ``d_target - d_coarse``, averaged over all pixels.

    ``d_target`` is treated as a constant. Returns ``(value, grad_d_coarse)``.
    """
    d_coarse = check_field(d_coarse, "d_coarse")
    d_target = check_field(d_target, "d_target")
    check_same_hw(d_coarse, d_target, names=("d_coarse", "d_target"))
    mask = check_mask(mask, d_coarse.shape)
    diff = d_target - d_coarse
    n = diff.size
    value = float(np.sum(huber(diff, beta) * mask) / n)
    slope = np.where(np.abs(diff) < beta, diff / beta, np.sign(diff))
    return value, -slope * mask / n


def calibration_report(uscore, abs_error, valid=None, t=DEFAULT_MASK_THRESHOLD):
    """AUROC against ``|error| > 1`` labels, Pearson r with ``|error|``, and high-score precision."""
    uscore = np.asarray(uscore, dtype=np.float64)
    abs_error = np.asarray(abs_error, dtype=np.float64)
    if uscore.shape != abs_error.shape:
        raise InvalidInputError(f"uscore {uscore.shape} and error {abs_error.shape} differ")
    valid = np.ones(uscore.shape, bool) if valid is None else np.asarray(valid, bool)
    u, e = uscore[valid], abs_error[valid]
    labels = e > ERROR_THRESHOLD
    report = {"n_pixels": int(u.size), "positive_rate": float(labels.mean()) if u.size else 0.0,
              "threshold": t, "auroc_defined": True}
    constant = u.size == 0 or u.min() == u.max()
    if constant or labels.all() or not labels.any():
        report["auroc"] = 0.5
        report["auroc_defined"] = False
    else:
        report["auroc"] = float(roc_auc_score(labels, u))
    if constant or e.size == 0 or e.min() == e.max():
        report["pearson_r"] = 0.0
    else:
        report["pearson_r"] = float(np.corrcoef(u, e)[0, 1])
    high = u >= t
    report["high_bucket_size"] = int(high.sum())
    report["high_bucket_precision"] = float(labels[high].mean()) if high.any() else None
    return report


def self_supervised_finetune(img_left, img_right, result, uscore, t=DEFAULT_MASK_THRESHOLD, weight=1.0):
    """Refine the coarse levels toward the (downsampled) full-resolution disparity.

    Each coarse level restarts from its previous best field with an extra
    masked Huber term whose target is the current full-resolution estimate;
    the mask keeps pixels whose box-averaged uncertainty is below ``t``. The
    finest level is then re-refined inside the range implied by the new
    coarse fields. Returns a new :class:`RefineResult`.
    """
    config = result.config
    pyr_l, pyr_r = build_pyramid(img_left), build_pyramid(img_right)
    target_full = result.disparity
    uscore = check_field(uscore, "uscore")
    check_same_hw(uscore, target_full, names=("uscore", "disparity"))
    full_w = target_full.shape[1]
    levels = list(result.levels)
    prev = None
    for level in range(len(levels) - 1, -1, -1):
        state = levels[level]
        pl, pr = pyr_l[level], pyr_r[level]
        h, w = pl.shape[:2]
        if level > 0:
            target = downsample_field(target_full, h, w)
            mask = reliability_mask(downsample_map(uscore, h, w), t)

            def extra(d, target=target, mask=mask):
                value, grad = loss_self_sup(d, target, mask)
                return weight * value, weight * grad

            bounds, back_bounds = state.bounds, state.back_bounds
        else:
            extra = None
            limit = config.global_range * w / full_w
            bounds = next_range(prev.disparity, prev.sigma, config.spread_s, config.spread_eps, h, w, limit)
            back_bounds = next_range(prev.back, prev.back_sigma, config.spread_s, config.spread_eps, h, w, limit)
        d, b, history = refine_level(pl, pr, state.disparity, state.sigma, config, level, state.back,
                                     bounds, back_bounds, extra)
        prev = levels[level] = LevelState(d, b, state.sigma, state.back_sigma, state.init, bounds, back_bounds,
                                          history, len(history) - 1)
    return RefineResult(levels[0].disparity, levels, config)

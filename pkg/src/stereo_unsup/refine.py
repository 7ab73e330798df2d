"""Coarse-to-fine variational refinement of disparity fields.

Each level starts from a census cost-volume regression inside the range
predicted by the coarser level, then runs gradient descent on the per-scale
unsupervised loss. Forward (left-referenced) and backward (right-referenced)
fields are optimised together so the occlusion mask can be recomputed every
step.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .cost_volume import GLOBAL_LIMIT, HypothesisRange, aggregate_costs, build_cost_volume, next_range, soft_regress
from .exceptions import DivergenceError, InvalidInputError
from .imaging import N_LEVELS, build_pyramid, upsample_field
from .losses import LossWeights, detect_occlusion, scale_loss, soft_census
from .validation import check_field, check_image, check_same_hw

CASCADE_MIN_SIDE = 64


@dataclass
class RefineConfig:
    steps_per_level: int = 60
    learning_rates: tuple = (0.2, 0.1, 0.05)  # px per step, coarse to fine
    temperature: float = 0.01
    aggregation_radius: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    global_range: float = GLOBAL_LIMIT
    early_stop_patience: int = 10
    spread_s: float = 0.0
    spread_eps: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        self.learning_rates = tuple(float(x) for x in self.learning_rates)
        if self.steps_per_level < 1:
            raise InvalidInputError("steps_per_level must be >= 1")
        if len(self.learning_rates) != N_LEVELS or min(self.learning_rates) <= 0:
            raise InvalidInputError("learning_rates needs three positive values")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        if self.early_stop_patience < 1:
            raise InvalidInputError("early_stop_patience must be >= 1")

    def learning_rate(self, level):
        return self.learning_rates[N_LEVELS - 1 - level]

    def to_dict(self):
        out = asdict(self)
        out["learning_rates"] = list(self.learning_rates)
        out["weights"] = self.weights.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        """Build from a dict; loss-weight keys may sit at top level or under ``weights``."""
        data = dict(data)
        weights = dict(data.pop("weights", {}) or {})
        for key in ("lambda_ap", "lambda_census", "lambda_sm", "alpha", "tau_levels"):
            if key in data:
                weights[key] = data.pop(key)
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise InvalidInputError(f"unknown refine config keys: {', '.join(unknown)}")
        return cls(weights=LossWeights.from_dict(weights), **data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LevelState:
    disparity: np.ndarray
    back: np.ndarray
    sigma: np.ndarray
    back_sigma: np.ndarray
    init: np.ndarray
    bounds: HypothesisRange
    back_bounds: HypothesisRange
    history: list
    iterations: int


@dataclass
class RefineResult:
    disparity: np.ndarray  # full resolution, left-referenced
    levels: list  # LevelState per level, finest first
    config: RefineConfig

    @property
    def back_disparity(self):
        return self.levels[0].back

    @property
    def sigmas(self):
        return [lvl.sigma for lvl in self.levels]

    @property
    def history(self):
        return [lvl.history for lvl in self.levels]

    @property
    def iterations(self):
        return sum(lvl.iterations for lvl in self.levels)

    @property
    def coarse_init(self):
        """Coarsest-level regression before refinement, upsampled to full resolution."""
        h, w = self.disparity.shape
        return upsample_field(self.levels[-1].init, h, w)

    def history_records(self):
        return [rec for lvl in reversed(self.levels) for rec in lvl.history]


def level_limit(config, level_width, full_width):
    return config.global_range * level_width / full_width


def match_level(left, right, bounds, temperature, aggregation_radius=0):
    """Regress disparity and spread from an (optionally aggregated) census cost volume."""
    cv = build_cost_volume(left, right, bounds)
    return soft_regress(aggregate_costs(cv, aggregation_radius), temperature)


def init_coarse(left, right, bounds=None, temperature=0.01, aggregation_radius=3, limit=None):
    """Initial disparity and spread over ``[-limit, limit]`` (default: image width - 1)."""
    left = check_image(left, name="left")
    right = check_image(right, name="right")
    check_same_hw(left, right, names=("left", "right"))
    if bounds is None:
        h, w = left.shape[:2]
        limit = float(w - 1) if limit is None else limit
        bounds = HypothesisRange.uniform(h, w, -limit, limit)
    return match_level(left, right, bounds, temperature, aggregation_radius)


def _objective(left, right, d_f, d_b, weights, tau, census_l, census_r, extra):
    occ_f = detect_occlusion(d_f, d_b, tau)
    occ_b = detect_occlusion(d_b, d_f, tau)
    terms_f, grad_f, _ = scale_loss(left, right, d_f, d_b, weights, tau, census_l, occ_f)
    terms_b, grad_b, _ = scale_loss(right, left, d_b, d_f, weights, tau, census_r, occ_b)
    terms = {k: terms_f[k] + terms_b[k] for k in terms_f}
    total = weights.lambda_ap * terms["ap"] + weights.lambda_census * terms["census"] + weights.lambda_sm * terms["sm"]
    if extra is not None:
        value, grad_extra = extra(d_f)
        terms["extra"] = value
        total += value
        grad_f = grad_f + grad_extra
    terms["total"] = total
    return terms, grad_f, grad_b


def _descend(field, grad, lr, bounds):
    scale = np.abs(grad).max()
    if not scale > 0:
        return field
    return bounds.clamp(field - (lr / scale) * grad)


def refine_level(left, right, d_init, sigma_init, config, level=0, back_init=None,
                 bounds=None, back_bounds=None, extra=None):
    """Gradient descent on the single-scale loss of one pyramid level.

    The step moves the pixel with the largest gradient by ``lr`` pixels and the
    rest proportionally; fields are clamped to ``bounds`` (by default the
    spread-based range around ``d_init`` built from ``sigma_init``). ``extra`` is an
    optional ``d -> (value, grad)`` term added to the forward objective.

    Returns ``(disparity, back_disparity, history)`` where the fields are the
    best iterate seen.
    """
    left = check_image(left, name="left")
    right = check_image(right, name="right")
    d_f = check_field(d_init, "d_init")
    sigma_init = check_field(sigma_init, "sigma_init")
    check_same_hw(left, right, d_f, sigma_init, names=("left", "right", "d_init", "sigma_init"))
    h, w = d_f.shape
    if bounds is None:
        bounds = next_range(d_f, sigma_init, config.spread_s, config.spread_eps, h, w, config.global_range)
    if back_init is None:
        back_init = -d_f
    if back_bounds is None:
        back_bounds = bounds.negated()
    d_f = bounds.clamp(d_f)
    d_b = back_bounds.clamp(check_field(back_init, "back_init"))

    weights = config.weights
    tau = weights.tau_for_level(level)
    lr = config.learning_rate(level)
    census_l, census_r = soft_census(left), soft_census(right)

    history = []
    best = None
    stale = 0
    for step in range(config.steps_per_level + 1):
        terms, grad_f, grad_b = _objective(left, right, d_f, d_b, weights, tau, census_l, census_r, extra)
        if not np.isfinite(terms["total"]) or not (np.all(np.isfinite(grad_f)) and np.all(np.isfinite(grad_b))):
            raise DivergenceError(level, step, terms["total"])
        history.append({"level": level, "step": step, **{k: float(v) for k, v in terms.items()}})
        if best is None or terms["total"] < best[0]:
            best = (terms["total"], d_f, d_b)
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
        if step == config.steps_per_level:
            break
        d_f = _descend(d_f, grad_f, lr, bounds)
        d_b = _descend(d_b, grad_b, lr, back_bounds)
    return best[1], best[2], history


def cascade_refine(left, right, config=None, extras=None):
    """Three-level coarse-to-fine estimation of the left-referenced disparity.

    ``extras`` optionally maps a level index to an extra loss term for
    :func:`refine_level` (used by the self-supervised fine-tune).
    """
    config = RefineConfig() if config is None else config
    left = check_image(left, min_side=CASCADE_MIN_SIDE, name="left")
    right = check_image(right, min_side=CASCADE_MIN_SIDE, name="right")
    if left.shape != right.shape:
        check_same_hw(left, right, names=("left", "right"))
        raise InvalidInputError(f"channel counts differ: {left.shape[2]} vs {right.shape[2]}")
    pyr_l, pyr_r = build_pyramid(left), build_pyramid(right)
    full_w = left.shape[1]
    extras = extras or {}

    states = [None] * N_LEVELS
    prev = None
    for level in range(N_LEVELS - 1, -1, -1):
        pl, pr = pyr_l[level], pyr_r[level]
        h, w = pl.shape[:2]
        limit = level_limit(config, w, full_w)
        if prev is None:
            bounds = HypothesisRange.uniform(h, w, -limit, limit)
            back_bounds = bounds.negated()
        else:
            bounds = next_range(prev.disparity, prev.sigma, config.spread_s, config.spread_eps, h, w, limit)
            back_bounds = next_range(prev.back, prev.back_sigma, config.spread_s, config.spread_eps, h, w, limit)
        d_init, sigma = match_level(pl, pr, bounds, config.temperature, config.aggregation_radius)
        b_init, b_sigma = match_level(pr, pl, back_bounds, config.temperature, config.aggregation_radius)
        d, b, history = refine_level(pl, pr, d_init, sigma, config, level, b_init, bounds, back_bounds,
                                     extras.get(level))
        prev = states[level] = LevelState(d, b, sigma, b_sigma, d_init, bounds, back_bounds, history,
                                          len(history) - 1)
    return RefineResult(states[0].disparity, states, config)


class CascadeStereo(BaseEstimator):
    """Estimator wrapper around :func:`cascade_refine`.

    ``fit(left, right)`` stores ``disparity_``, ``sigma_`` (per level, finest
    first) and ``result_``; ``predict`` returns the full-resolution disparity.
    """

    def __init__(self, steps_per_level=60, learning_rates=(0.2, 0.1, 0.05), temperature=0.01,
                 aggregation_radius=3, lambda_ap=1.0, lambda_census=1.0, lambda_sm=0.1, alpha=0.85,
                 tau_levels=(5.0, 2.0, 1.0), global_range=GLOBAL_LIMIT, early_stop_patience=10,
                 spread_s=0.0, spread_eps=0.0):
        self.steps_per_level = steps_per_level
        self.learning_rates = learning_rates
        self.temperature = temperature
        self.aggregation_radius = aggregation_radius
        self.lambda_ap = lambda_ap
        self.lambda_census = lambda_census
        self.lambda_sm = lambda_sm
        self.alpha = alpha
        self.tau_levels = tau_levels
        self.global_range = global_range
        self.early_stop_patience = early_stop_patience
        self.spread_s = spread_s
        self.spread_eps = spread_eps

    def get_config(self):
        params = self.get_params()
        return RefineConfig.from_dict(params)

    def fit(self, left, right):
        self.result_ = cascade_refine(left, right, self.get_config())
        self.disparity_ = self.result_.disparity
        self.sigma_ = self.result_.sigmas
        self.n_iter_ = self.result_.iterations
        return self

    def predict(self, left, right):
        return self.fit(left, right).disparity_

    def fit_predict(self, left, right):
        return self.predict(left, right)

"""Census matching costs, softmax disparity regression and cascaded search ranges."""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .exceptions import InvalidInputError
from .imaging import to_gray, upsample_field
from .validation import check_field, check_same_hw

CENSUS_RADIUS = 3
CENSUS_OFFSETS = tuple(
    (dy, dx)
    for dy in range(-CENSUS_RADIUS, CENSUS_RADIUS + 1)
    for dx in range(-CENSUS_RADIUS, CENSUS_RADIUS + 1)
    if (dy, dx) != (0, 0)
)
CENSUS_BITS = len(CENSUS_OFFSETS)  # 48

GLOBAL_LIMIT = 128.0
MASKED_COST = 1e4
DEFAULT_TEMPERATURE = 0.05


@dataclass
class HypothesisRange:
    """Per-pixel inclusive disparity bounds plus the spread factors used to derive them."""

    d_min: np.ndarray
    d_max: np.ndarray
    s: float = 0.0
    eps: float = 0.0

    def __post_init__(self):
        self.d_min = np.asarray(self.d_min, dtype=np.float64)
        self.d_max = np.asarray(self.d_max, dtype=np.float64)
        if self.d_min.shape != self.d_max.shape:
            raise InvalidInputError("d_min and d_max shapes differ")
        if np.any(self.d_min > self.d_max):
            raise InvalidInputError("d_min exceeds d_max")

    @classmethod
    def uniform(cls, height, width, d_min, d_max):
        return cls(np.full((height, width), float(d_min)), np.full((height, width), float(d_max)))

    @property
    def shape(self):
        return self.d_min.shape

    def clamp(self, field):
        return np.clip(field, self.d_min, self.d_max)

    def negated(self):
        """Range for the right-referenced (sign-flipped) field."""
        return HypothesisRange(-self.d_max, -self.d_min, self.s, self.eps)


@dataclass
class CostVolume:
    hypotheses: np.ndarray  # (D,) strictly increasing integers
    cost: np.ndarray  # (D, H, W), >= 0

    def __post_init__(self):
        self.hypotheses = np.asarray(self.hypotheses, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.hypotheses.ndim != 1 or self.hypotheses.size == 0:
            raise InvalidInputError("cost volume needs a non-empty 1-D hypothesis list")
        if self.hypotheses.size > 1 and np.any(np.diff(self.hypotheses) <= 0):
            raise InvalidInputError("hypotheses must be strictly increasing")
        if self.cost.ndim != 3 or self.cost.shape[0] != self.hypotheses.size:
            raise InvalidInputError(f"cost shape {self.cost.shape} does not match {self.hypotheses.size} hypotheses")


def census_transform(img):
    """48-bit census descriptor of the 7x7 window around each pixel.

    Bit ``k`` is set iff neighbour ``CENSUS_OFFSETS[k]`` is strictly darker than
    the centre. Windows are edge-clamped. Multi-channel input uses channel-mean
    intensity. Returns a ``uint64`` array of shape ``(H, W)``.
    """
    gray = to_gray(img)
    h, w = gray.shape
    r = CENSUS_RADIUS
    padded = np.pad(gray, r, mode="edge")
    codes = np.zeros((h, w), dtype=np.uint64)
    for k, (dy, dx) in enumerate(CENSUS_OFFSETS):
        neighbour = padded[r + dy:r + dy + h, r + dx:r + dx + w]
        codes |= (neighbour < gray).astype(np.uint64) << np.uint64(k)
    return codes


def hamming(a, b):
    return np.bitwise_count(np.bitwise_xor(a, b))


def _hypotheses_for(rng):
    lo = np.floor(rng.d_min.min())
    hi = np.ceil(rng.d_max.max())
    return np.arange(lo, hi + 1.0)


def build_cost_volume(left, right, rng):
    """Normalised census Hamming cost for every hypothesis in ``rng``.

    ``cost[k, r, c] = Hamming(census_l(r, c), census_r(r, c - d_k)) / 48`` with the
    right column clamped into the image. Hypotheses outside a pixel's own
    ``[d_min, d_max]`` get ``MASKED_COST``.
    """
    check_same_hw(left, right, rng.d_min, names=("left", "right", "range"))
    hyps = _hypotheses_for(rng)
    if hyps.size == 0:
        raise InvalidInputError("empty hypothesis range")
    cl = census_transform(left)
    cr = census_transform(right)
    h, w = cl.shape
    cols = np.arange(w)
    cost = np.empty((hyps.size, h, w))
    for k, d in enumerate(hyps):
        src = np.clip(cols - int(d), 0, w - 1)
        cost[k] = hamming(cl, cr[:, src]) / CENSUS_BITS
        outside = (d < rng.d_min) | (d > rng.d_max)
        cost[k][outside] = MASKED_COST
    return CostVolume(hyps, cost)


def aggregate_costs(cv, radius):
    """Box-average each hypothesis slice over a ``(2r+1)^2`` window (edge-replicated).

    Inside the window masked entries count as the worst real cost (1.0); they
    stay masked in the output.
    """
    if radius <= 0:
        return cv
    masked = cv.cost >= MASKED_COST
    size = 2 * radius + 1
    cost = uniform_filter(np.where(masked, 1.0, cv.cost), size=(1, size, size), mode="nearest")
    cost[masked] = MASKED_COST
    return CostVolume(cv.hypotheses, cost)


def softmax_weights(cv, temperature=DEFAULT_TEMPERATURE):
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    logits = -cv.cost / temperature
    logits -= logits.max(axis=0, keepdims=True)
    weights = np.exp(logits)
    # fixed hypothesis order for the normalising sum
    total = np.zeros(cv.cost.shape[1:])
    for k in range(weights.shape[0]):
        total += weights[k]
    return weights / total


def soft_regress(cv, temperature=DEFAULT_TEMPERATURE):
    """Expected disparity and its standard deviation under ``softmax(-cost / temperature)``."""
    weights = softmax_weights(cv, temperature)
    d = cv.hypotheses
    mean = np.zeros(cv.cost.shape[1:])
    for k in range(d.size):
        mean += d[k] * weights[k]
    var = np.zeros_like(mean)
    for k in range(d.size):
        var += (d[k] - mean) ** 2 * weights[k]
    mean = np.clip(mean, d[0], d[-1])
    return mean, np.sqrt(var)


def next_range(d_hat, sigma, s=0.0, eps=0.0, height=None, width=None, limit=GLOBAL_LIMIT):
    """Search range for the next (finer) level from the current estimate and spread.

    ``d_max = up(d_hat + (s + 1) sigma + eps)`` and ``d_min = up(d_hat - (s + 1) sigma - eps)``,
    where ``up`` is :func:`upsample_field`. Bounds are rounded outward and clipped
    to ``[-limit, limit]``.
    """
    d_hat = check_field(d_hat, "d_hat")
    sigma = check_field(sigma, "sigma")
    check_same_hw(d_hat, sigma, names=("d_hat", "sigma"))
    if np.any(sigma < 0):
        raise InvalidInputError("sigma must be non-negative")
    height = d_hat.shape[0] if height is None else height
    width = d_hat.shape[1] if width is None else width
    spread = (s + 1.0) * sigma + eps
    upper = upsample_field(d_hat + spread, height, width)
    lower = upsample_field(d_hat - spread, height, width)
    d_max = np.clip(np.ceil(upper), -limit, limit)
    d_min = np.clip(np.floor(lower), -limit, limit)
    return HypothesisRange(np.minimum(d_min, d_max), d_max, s, eps)

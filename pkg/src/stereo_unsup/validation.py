"""Input validation helpers shared by the functional API and the estimators."""
import numpy as np

from .exceptions import DimensionMismatchError, InvalidInputError

MIN_SIDE = 16
TILE_ROWS = 16


def check_image(img, min_side=0, name="image"):
    """Return ``img`` as a float64 ``(H, W, C)`` array with C in {1, 3}.

    2-D input is promoted to one channel. Values must be finite and in [0, 1].
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InvalidInputError(f"{name}: expected (H, W) or (H, W, 1|3) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidInputError(f"{name}: values outside [0, 1]")
    if min(arr.shape[:2]) < min_side:
        raise InvalidInputError(f"{name}: {arr.shape[0]}x{arr.shape[1]} is smaller than {min_side}x{min_side}")
    return arr


def check_field(field, name="disparity"):
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name}: expected 2-D field, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite values")
    return arr


def check_mask(mask, shape=None, name="mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name}: expected 2-D mask, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionMismatchError(f"{name}: shape {arr.shape} does not match {tuple(shape)}")
    return arr.astype(bool)


def check_same_hw(*arrays, names=None):
    """Raise DimensionMismatchError unless all arrays share height and width."""
    shapes = [np.shape(a)[:2] for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        label = ", ".join(names) if names else "inputs"
        raise DimensionMismatchError(f"{label}: spatial shapes differ {shapes}")
    return shapes[0]


def tiled_sum(values):
    """Sum over all elements with a fixed row-tile partition and combination order.

    The result depends only on the array contents, never on threading.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    total = 0.0
    for start in range(0, arr.shape[0], TILE_ROWS):
        total += float(np.sum(arr[start:start + TILE_ROWS]))
    return total


def tiled_mean(values, count=None):
    arr = np.asarray(values, dtype=np.float64)
    n = arr.size if count is None else count
    if n == 0:
        raise InvalidInputError("mean over zero elements")
    return tiled_sum(arr) / n

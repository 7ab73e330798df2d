"""Order-preserving worker pool sized by ``STEREO_UNSUP_THREADS``."""
import os
from concurrent.futures import ThreadPoolExecutor

from .exceptions import InvalidInputError

THREADS_ENV = "STEREO_UNSUP_THREADS"


def worker_count():
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise InvalidInputError(f"{THREADS_ENV} must be >= 1")
    return n


def ordered_map(fn, items):
    """``[fn(x) for x in items]``, possibly on several threads; result order never changes."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

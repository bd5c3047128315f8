"""Optional per-particle thread parallelism, capped by AEROSTATE_THREADS.

Work items must not draw random numbers: callers pre-draw noise in particle
order so results do not depend on scheduling.
"""

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "AEROSTATE_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    return max(n, 0)


def particle_map(fn, items):
    """``[fn(i, item) for i, item in enumerate(items)]``, possibly threaded."""
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) < 2:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, range(len(items)), items))

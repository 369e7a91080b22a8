import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "RGBD_ATLAS_THREADS"


def worker_count() -> int:
    """Parallelism cap from ``RGBD_ATLAS_THREADS`` (default: CPU count)."""
    raw = os.environ.get(ENV_VAR)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Ordered map over ``items``; results do not depend on the thread count."""
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))

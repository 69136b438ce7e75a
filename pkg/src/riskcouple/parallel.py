"""Ordered thread-pool map used for independent experiment cells."""

from concurrent.futures import ThreadPoolExecutor


def ordered_map(fn, items, workers=1):
    """``[fn(x) for x in items]``, evaluated on up to ``workers`` threads.

    Results come back in input order, and every cell carries its own seed,
    so the output does not depend on the worker count.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))

"""
Bounded worker pool. Results always come back in input order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from .config import get_settings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Map fn over items on up to ICL_LAB_THREADS threads (numpy releases the GIL in BLAS)"""
    items = list(items)
    n = workers if workers is not None else get_settings().threads
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug("dispatching %d items to %d workers", len(items), n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from utils.logger import setup_logger

logger = setup_logger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def run_parallel(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """
    Apply fn to every item on a thread pool of `jobs` workers.

    Results come back in input order, so callers see the same output for
    any worker count. The first exception raised by a task is re-raised.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    workers = min(jobs, len(items))
    logger.debug(f"Dispatching {len(items)} tasks to {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]

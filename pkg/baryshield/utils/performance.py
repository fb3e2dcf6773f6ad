import concurrent.futures
import logging
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class ThreadPoolManager:
    """Order-preserving thread pool for independent solves.

    numpy releases the GIL inside its array kernels, so per-channel and
    per-sample barycenters overlap well on threads. Results always come back
    in submission order, which keeps parallel runs bitwise identical to
    serial ones.
    """

    def __init__(self, max_workers: Optional[int] = 1):
        self.max_workers = max_workers
        self.executor = None
        if max_workers is None or max_workers > 1:
            self.executor = concurrent.futures.ThreadPoolExecutor(max_workers=max_workers)
        self._futures: List[concurrent.futures.Future] = []

    def submit(self, fn: Callable[..., R], *args, **kwargs) -> concurrent.futures.Future:
        """Submit a task; runs inline when the pool is serial"""
        if self.executor is None:
            future: concurrent.futures.Future = concurrent.futures.Future()
            try:
                future.set_result(fn(*args, **kwargs))
            except BaseException as e:
                future.set_exception(e)
        else:
            future = self.executor.submit(fn, *args, **kwargs)
        self._futures.append(future)
        return future

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """Apply fn to every item and return results in input order"""
        futures = [self.submit(fn, item) for item in items]
        return [future.result() for future in futures]

    def wait_all(self):
        """Wait for all submitted tasks to complete"""
        concurrent.futures.wait(self._futures)
        self._futures = []

    def shutdown(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None

    def __enter__(self) -> "ThreadPoolManager":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.shutdown()
        return False

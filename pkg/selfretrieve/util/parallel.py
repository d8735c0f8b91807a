from __future__ import annotations

import logging
import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Callable, TypeVar

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_PARALLEL", "NOTSET"))

T = TypeVar("T")
R = TypeVar("R")

_DONE = object()


def max_workers() -> int:
    """Worker count, capped by ``SELFRETRIEVE_THREADS`` when set."""
    default = os.cpu_count() or 1
    value = os.getenv("SELFRETRIEVE_THREADS")
    if not value:
        return default
    try:
        return max(1, min(default, int(value)))
    except ValueError:
        log.warning("Ignoring invalid SELFRETRIEVE_THREADS value %r", value)
        return default


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """Apply ``func`` to every item on a thread pool, returning results in input order."""
    items = list(items)
    workers = min(workers or max_workers(), len(items))
    if workers <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="selfretrieve") as pool:
        return list(pool.map(func, items))


def prefetch(producer: Iterable[T], depth: int = 2) -> Iterator[T]:
    """Iterate ``producer`` on a background thread, buffering at most ``depth`` items.

    Items are yielded in production order. An exception raised by the producer is re-raised in the
    consumer. Abandoning the iterator stops the producer at its next item.
    """
    buffer: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def put(entry: tuple[object, BaseException | None]) -> bool:
        while not stop.is_set():
            try:
                buffer.put(entry, timeout=0.1)
            except queue.Full:
                continue
            return True
        return False

    def run() -> None:
        try:
            for item in producer:
                if not put((item, None)):
                    return
            put((_DONE, None))
        except BaseException as e:
            put((_DONE, e))

    thread = threading.Thread(target=run, name="selfretrieve-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item, error = buffer.get()
            if item is _DONE:
                if error is not None:
                    raise error
                return
            yield item
    finally:
        stop.set()
        thread.join(timeout=1.0)

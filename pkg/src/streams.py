import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, List, Optional, Tuple, TypeVar

import numpy as np

from config import settings

logger = logging.getLogger(__name__)

# Stream identifiers; one master seed fans out into these independent families.
STREAM_FROZEN_PATH = 1
STREAM_FROZEN_ENSEMBLE = 2
STREAM_MONTE_CARLO_H = 3
STREAM_COUPLED = 4
STREAM_COUPLING_ERROR = 5
STREAM_LEMMA5 = 6
STREAM_TUBE = 7
STREAM_VALIDATE = 8

T = TypeVar('T')


def generator(seed: int, stream_id: int, index: int = 0) -> np.random.Generator:
    """Counter-based Gaussian source keyed by (seed, stream_id, index)."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id), int(index)))
    return np.random.Generator(np.random.Philox(sequence))


def replica_blocks(replicas: int, block_size: Optional[int] = None) -> List[Tuple[int, int, int]]:
    """Split replicas into (block_index, start, stop); the layout ignores the worker count."""
    size = block_size or settings.REPLICA_BLOCK_SIZE
    return [(k, start, min(start + size, replicas))
            for k, start in enumerate(range(0, replicas, size))]


def run_indexed(tasks: List[Callable[[], T]], jobs: Optional[int] = None,
                label: str = 'tasks') -> List[T]:
    """Run independent tasks on a thread pool and return results in task order."""
    results: List[Optional[T]] = [None] * len(tasks)
    workers = settings.workers(jobs)
    if workers == 1 or len(tasks) <= 1:
        for i, task in enumerate(tasks):
            results[i] = task()
        return results

    done = 0
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(task): i for i, task in enumerate(tasks)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
            done += 1
            if len(tasks) >= 20 and done % max(1, len(tasks) // 10) == 0:
                logger.info(f"Progress: {done}/{len(tasks)} {label}")
    return results


def run_replica_blocks(block_fn: Callable[[int, int], T], replicas: int,
                       jobs: Optional[int] = None, label: str = 'replica blocks') -> List[T]:
    """Call block_fn(block_index, size) for every block; results follow block order."""
    blocks = replica_blocks(replicas)
    tasks = [(lambda k=k, n=stop - start: block_fn(k, n)) for k, start, stop in blocks]
    return run_indexed(tasks, jobs=jobs, label=label)

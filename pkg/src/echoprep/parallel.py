"""Order-preserving process-pool map used for sample and grid tasks."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs() -> int:
    return int(os.environ.get("ECHOPREP_JOBS", "1"))


def parallel_map(func, tasks, jobs: int | None = None) -> list:
    """``[func(t) for t in tasks]``, optionally spread over ``jobs`` processes.

    Results come back in task order, so any reduction over them is
    independent of the number of workers.
    """
    tasks = list(tasks)
    jobs = default_jobs() if jobs is None else jobs
    if jobs <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(func, tasks))

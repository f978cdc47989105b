"""Task queue with per-worker deques and work stealing."""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence


class ScheduleError(ValueError):
    pass


@dataclass
class WorkItem:
    """A forward, backward or aggregation unit with declared dependencies."""

    id: Hashable
    kind: str
    fn: Callable[[], object] | None = None
    deps: tuple = ()
    cost: float = 1.0


@dataclass
class ScheduleLog:
    order: list = field(default_factory=list)  # (worker, task id) in start order
    executed_by: dict = field(default_factory=dict)
    steals: int = 0
    results: dict = field(default_factory=dict)

    def per_worker(self, workers: int) -> list[int]:
        counts = [0] * workers
        for w in self.executed_by.values():
            counts[w] += 1
        return counts


def _check_acyclic(tasks: Sequence[WorkItem]) -> list:
    ids = {t.id for t in tasks}
    if len(ids) != len(tasks):
        raise ScheduleError("duplicate task id")
    deps = {t.id: tuple(t.deps) for t in tasks}
    for t in tasks:
        for d in t.deps:
            if d not in ids:
                raise ScheduleError(f"task {t.id!r} depends on unknown task {d!r}")
    order, state = [], {}

    def visit(v, path):
        s = state.get(v)
        if s == 1:
            raise ScheduleError(f"dependency cycle through {v!r}")
        if s == 2:
            return
        state[v] = 1
        for d in deps[v]:
            visit(d, path)
        state[v] = 2
        order.append(v)

    for t in tasks:
        visit(t.id, ())
    return order


class TaskQueue:
    """Round-robin initial placement; an idle worker steals from the tail of
    the busiest deque (ties go to the lowest worker id)."""

    def __init__(self, tasks: Sequence[WorkItem], workers: int):
        if workers < 1:
            raise ScheduleError("need at least one worker")
        _check_acyclic(tasks)
        self.workers = workers
        self.queues = [deque() for _ in range(workers)]
        for i, t in enumerate(tasks):
            self.queues[i % workers].append(t)
        self.done: set = set()
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.remaining = len(tasks)

    def _ready(self, t: WorkItem) -> bool:
        return all(d in self.done for d in t.deps)

    def take(self, w: int, log: ScheduleLog) -> WorkItem | None:
        """Next runnable task for worker ``w`` (caller holds the lock)."""
        q = self.queues[w]
        for i, t in enumerate(q):
            if self._ready(t):
                del q[i]
                return t
        order = sorted(range(self.workers), key=lambda v: (-len(self.queues[v]), v))
        for v in order:
            if v == w or not self.queues[v]:
                continue
            for i in range(len(self.queues[v]) - 1, -1, -1):
                t = self.queues[v][i]
                if self._ready(t):
                    del self.queues[v][i]
                    log.steals += 1
                    return t
        return None


def schedule(tasks: Sequence[WorkItem], workers: int = 1, deterministic: bool = False,
             delay: Callable[[WorkItem], float] | None = None) -> ScheduleLog:
    """Run every task exactly once, respecting dependencies.

    ``deterministic`` runs tasks on the calling thread in a fixed
    (dependency-respecting, submission-stable) order.  ``delay`` injects
    per-task sleep for stress tests.
    """
    log = ScheduleLog()
    if deterministic or workers == 1:
        order = _check_acyclic(tasks)
        by_id = {t.id: t for t in tasks}
        if workers == 1 and not deterministic:
            order = _fifo_order(tasks)
        for tid in order:
            t = by_id[tid]
            log.order.append((0, t.id))
            log.executed_by[t.id] = 0
            log.results[t.id] = t.fn() if t.fn else None
        return log
    tq = TaskQueue(tasks, workers)
    errors: list[BaseException] = []

    def worker(w: int):
        while True:
            with tq.cond:
                while True:
                    if tq.remaining == 0 or errors:
                        tq.cond.notify_all()
                        return
                    t = tq.take(w, log)
                    if t is not None:
                        break
                    tq.cond.wait(0.05)
                log.order.append((w, t.id))
                log.executed_by[t.id] = w
            try:
                if delay is not None:
                    time.sleep(delay(t))
                res = t.fn() if t.fn else None
            except BaseException as exc:  # surfaced after join
                with tq.cond:
                    errors.append(exc)
                    tq.cond.notify_all()
                return
            with tq.cond:
                log.results[t.id] = res
                tq.done.add(t.id)
                tq.remaining -= 1
                tq.cond.notify_all()

    threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return log


def _fifo_order(tasks: Sequence[WorkItem]) -> list:
    """Submission order, postponing a task only until its dependencies ran."""
    pending = list(tasks)
    done, order = set(), []
    while pending:
        for i, t in enumerate(pending):
            if all(d in done for d in t.deps):
                order.append(t.id)
                done.add(t.id)
                del pending[i]
                break
    return order


def simulate(costs: Sequence[float], workers: int) -> list[int]:
    """Discrete-time model of the stealing policy for independent tasks.

    Returns how many tasks each worker executed.
    """
    queues = [deque() for _ in range(workers)]
    for i, c in enumerate(costs):
        queues[i % workers].append(c)
    busy_until = [0.0] * workers
    counts = [0] * workers
    now = 0.0
    while any(queues):
        for w in sorted(range(workers), key=lambda v: (busy_until[v], v)):
            if busy_until[w] > now:
                continue
            if queues[w]:
                c = queues[w].popleft()
            else:
                victims = sorted((v for v in range(workers) if queues[v]), key=lambda v: (-len(queues[v]), v))
                if not victims:
                    continue
                c = queues[victims[0]].pop()
            busy_until[w] = now + c
            counts[w] += 1
        now = min((b for b in busy_until if b > now), default=now + 1.0)
    return counts

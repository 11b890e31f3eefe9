"""Simulated-GPU worker pool: priority/FIFO job queue with budget accounting.

Workers run in real threads but consume simulated gpu-hours from the cost
model; wall-clock time never enters any recorded quantity."""

from __future__ import annotations

import heapq
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable

from .training import CancelSignal, ExperimentRecord, TrainRunSpec


class BudgetExceeded(RuntimeError):
    def __init__(self, projected: float, remaining: float):
        self.projected = projected
        self.remaining = remaining
        self.shortfall = projected - remaining
        super().__init__(
            f"projected cost {projected:.6f} gpu-hours exceeds remaining "
            f"{remaining:.6f} (shortfall {self.shortfall:.6f})")


@dataclass
class Budget:
    gpu_hours_total: float
    max_concurrent_workers: int = 1
    gpu_hours_spent: float = 0.0

    @property
    def remaining(self) -> float:
        return self.gpu_hours_total - self.gpu_hours_spent

    def check(self, projected: float):
        if projected > self.remaining:
            raise BudgetExceeded(projected, self.remaining)

    def charge(self, hours: float):
        if hours < 0:
            raise ValueError("cannot charge negative gpu-hours")
        self.gpu_hours_spent += hours
        if self.gpu_hours_spent > self.gpu_hours_total + 1e-12:
            raise BudgetExceeded(0.0, self.remaining)

    def to_dict(self) -> dict:
        return {"gpu_hours_total": self.gpu_hours_total,
                "gpu_hours_spent": self.gpu_hours_spent,
                "max_concurrent_workers": self.max_concurrent_workers}


_TICKET_STATES = ("Queued", "Running", "Succeeded", "Faulted", "Cancelled")
_LEGAL_MOVES = {"Queued": {"Running"},
                "Running": {"Succeeded", "Faulted", "Cancelled"}}


@dataclass
class JobTicket:
    job_id: str
    spec: TrainRunSpec
    priority: int = 0
    submit_seq: int = 0
    state: str = "Queued"
    record: ExperimentRecord | None = None
    worker_id: int | None = None
    cancel: CancelSignal = field(default_factory=CancelSignal)

    def advance(self, state: str):
        if state not in _LEGAL_MOVES.get(self.state, set()):
            raise RuntimeError(f"illegal ticket transition {self.state} -> {state}")
        self.state = state


class WorkerPool:
    """Pulls tickets in (priority, submit order); at most N run concurrently."""

    def __init__(self, budget: Budget, runner: Callable[[JobTicket], ExperimentRecord]):
        self.budget = budget
        self.runner = runner
        self._lock = threading.Condition()
        self._queue: list = []
        self._seq = itertools.count()
        self.tickets: dict[str, JobTicket] = {}
        self.completed_order: list[str] = []
        self._shutdown = False
        self._threads = [threading.Thread(target=self._work, args=(i,), daemon=True)
                         for i in range(max(1, budget.max_concurrent_workers))]
        for t in self._threads:
            t.start()

    def submit(self, job_id: str, spec: TrainRunSpec, projected_cost: float,
               priority: int = 0) -> JobTicket:
        with self._lock:
            if job_id in self.tickets:
                raise RuntimeError(f"duplicate job id {job_id}")
            self.budget.check(projected_cost)
            ticket = JobTicket(job_id=job_id, spec=spec, priority=priority,
                               submit_seq=next(self._seq))
            self.tickets[job_id] = ticket
            heapq.heappush(self._queue, (priority, ticket.submit_seq, job_id))
            self._lock.notify_all()
        return ticket

    def _work(self, worker_id: int):
        while True:
            with self._lock:
                while not self._queue and not self._shutdown:
                    self._lock.wait()
                if self._shutdown:
                    return
                _, _, job_id = heapq.heappop(self._queue)
                ticket = self.tickets[job_id]
                ticket.advance("Running")
                ticket.worker_id = worker_id
            try:
                record = self.runner(ticket)
            except Exception as exc:  # defensive: a runner bug faults the run
                record = ExperimentRecord(run_id=ticket.job_id, spec=ticket.spec,
                                          status="Faulted",
                                          fault_reason=f"runner crashed: {exc}")
            with self._lock:
                ticket.record = record
                ticket.advance(record.status if record.status in
                               ("Succeeded", "Faulted", "Cancelled") else "Faulted")
                self.budget.charge(record.gpu_hours)
                self.completed_order.append(ticket.job_id)
                self._lock.notify_all()

    def await_ticket(self, job_id: str, timeout: float | None = None) -> JobTicket:
        deadline = None
        with self._lock:
            ticket = self.tickets[job_id]
            while ticket.state in ("Queued", "Running"):
                if not self._lock.wait(timeout=timeout):
                    raise TimeoutError(f"job {job_id} still {ticket.state}")
            return ticket

    def cancel(self, job_id: str):
        with self._lock:
            self.tickets[job_id].cancel.cancel()

    def running_count(self) -> int:
        with self._lock:
            return sum(1 for t in self.tickets.values() if t.state == "Running")

    def shutdown(self):
        with self._lock:
            self._shutdown = True
            self._lock.notify_all()
        for t in self._threads:
            t.join(timeout=5.0)

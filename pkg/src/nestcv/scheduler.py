"""Manager-worker task dispatch with pull-based load balancing.

The manager owns the task queue and the metadata log; workers pull one task
per slot, run it, and report back. Local mode runs worker slots as threads
in the manager process. Remote mode dials worker processes listed in a pool
file; each worker listens on a socket, and the two sides exchange
length-delimited JSON frames (hello/request/progress/done/failed/heartbeat
from the worker; assign/wait/shutdown from the manager).

Tasks are ordered longest-first within a phase (final_train, then
train_test, then train_val, ties by task id) so the greedy pull dispatcher
enjoys the usual list-scheduling makespan bound: wall <= serial/g + max.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import CheckpointStore, MetadataRecord, now
from .trainer import (
    FINAL_TRAIN,
    TRAIN_TEST,
    TRAIN_VAL,
    Backend,
    DataContext,
    TaskError,
    TaskResult,
    TrainerFailure,
    TrainingTask,
)
from .wire import WireError, recv_frame, send_frame, task_from_wire, task_to_wire

log = logging.getLogger(__name__)

_NOMINAL_COST = {FINAL_TRAIN: 2, TRAIN_TEST: 1, TRAIN_VAL: 0}


class SchedulerError(Exception):
    pass


class AllWorkersLost(SchedulerError):
    """Every worker disconnected or never arrived; the run cannot proceed."""


class RunFailedError(SchedulerError):
    def __init__(self, incomplete: dict[str, str]):
        names = ", ".join(sorted(incomplete))
        super().__init__(f"run failed; tasks exhausted retries: {names}")
        self.incomplete = dict(incomplete)


@dataclass(frozen=True)
class WorkerSpec:
    worker_id: str
    slots: int = 1
    endpoint: str | None = None  # None means an in-process slot


@dataclass(frozen=True)
class WorkerPool:
    workers: tuple[WorkerSpec, ...]

    def __post_init__(self):
        ids = [w.worker_id for w in self.workers]
        if len(set(ids)) != len(ids):
            raise SchedulerError("worker ids must be unique")
        if self.total_slots < 1:
            raise SchedulerError("pool needs at least one slot")

    @property
    def total_slots(self) -> int:
        return sum(w.slots for w in self.workers)

    @property
    def is_local(self) -> bool:
        return all(w.endpoint is None for w in self.workers)

    @classmethod
    def local(cls, slots: int) -> "WorkerPool":
        return cls(tuple(WorkerSpec(f"local{i}", 1, None) for i in range(slots)))

    @classmethod
    def parse_file(cls, path: str | Path) -> "WorkerPool":
        """Pool file: one `worker_id host:port slots` line per worker."""
        workers = []
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise SchedulerError(f"pool file line {line_no}: want 'id host:port slots'")
            worker_id, endpoint, slots = parts
            if ":" not in endpoint:
                raise SchedulerError(f"pool file line {line_no}: bad endpoint {endpoint!r}")
            try:
                nslots = int(slots)
            except ValueError:
                raise SchedulerError(f"pool file line {line_no}: bad slots {slots!r}") from None
            workers.append(WorkerSpec(worker_id, nslots, endpoint))
        return cls(tuple(workers))


def parse_pool(value: str) -> WorkerPool:
    """`local:4` for in-process slots, anything else is a pool file path."""
    if value.startswith("local:"):
        try:
            return WorkerPool.local(int(value.split(":", 1)[1]))
        except ValueError:
            raise SchedulerError(f"bad local pool spec {value!r}") from None
    return WorkerPool.parse_file(value)


@dataclass(frozen=True)
class PlannedPhase:
    """One barrier-delimited batch. Deferred phases get their tasks from a
    resolver at the barrier (their configurations depend on earlier results);
    only the count is known up front."""

    name: str
    tasks: tuple[TrainingTask, ...] = ()
    deferred_count: int = 0

    def size(self) -> int:
        return self.deferred_count if self.deferred_count else len(self.tasks)


@dataclass(frozen=True)
class TaskPlan:
    run_id: str
    phases: tuple[PlannedPhase, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for phase in self.phases:
            for task in phase.tasks:
                if task.task_id in seen:
                    raise SchedulerError(f"duplicate task id {task.task_id}")
                seen.add(task.task_id)

    def total_tasks(self) -> int:
        return sum(phase.size() for phase in self.phases)


def order_tasks(tasks) -> list[TrainingTask]:
    """Descending nominal cost, then task id: a longest-processing-time order."""
    return sorted(tasks, key=lambda t: (-_NOMINAL_COST[t.mode], t.task_id))


@dataclass
class TraceEntry:
    task_id: str
    worker_id: str
    started: float
    finished: float
    skipped: bool = False


@dataclass
class MakespanReport:
    wall_time: float
    serial_time: float
    per_worker_busy: dict[str, float]
    speedup: float
    longest_task: float


def makespan_report(trace: list[TraceEntry]) -> MakespanReport:
    executed = [entry for entry in trace if not entry.skipped]
    if not executed:
        return MakespanReport(0.0, 0.0, {}, 1.0, 0.0)
    start = min(entry.started for entry in executed)
    end = max(entry.finished for entry in executed)
    wall = end - start
    busy: dict[str, float] = {}
    for entry in executed:
        busy[entry.worker_id] = busy.get(entry.worker_id, 0.0) + (entry.finished - entry.started)
    serial = sum(busy.values())
    speedup = serial / wall if wall > 0 else 1.0
    longest = max(entry.finished - entry.started for entry in executed)
    return MakespanReport(wall, serial, busy, speedup, longest)


class _RunState:
    """Manager-side bookkeeping shared by local threads and remote handlers.

    All mutation happens under one lock; the metadata log is only written
    here, which keeps it single-writer regardless of transport.
    """

    def __init__(self, plan, store, resolve, retries, on_progress):
        self.plan = plan
        self.store = store
        self.resolve = resolve
        self.retries = retries
        self.on_progress = on_progress
        self.lock = threading.Lock()
        self.results: dict[str, TaskResult] = {}
        self.failed: dict[str, str] = {}
        self.attempts: dict[str, int] = {}
        self.in_flight: dict[str, TrainingTask] = {}
        self.pending: deque[TrainingTask] = deque()
        self.phase_index = -1
        self.phase_total = 0
        self.phase_done = 0
        self.all_done = threading.Event()
        self.fatal: BaseException | None = None
        self.recovery = store.recovery_view(plan.run_id)
        self.trace: list[TraceEntry] = []
        self._advance_locked()

    # -- phase control, callers hold self.lock --------------------------------

    def _enter_phase_locked(self, tasks) -> None:
        self.pending.clear()
        self.phase_total = len(tasks)
        self.phase_done = 0
        for task in order_tasks(tasks):
            self.pending.append(task)

    def _advance_locked(self) -> None:
        while True:
            self.phase_index += 1
            if self.phase_index >= len(self.plan.phases):
                self.all_done.set()
                return
            phase = self.plan.phases[self.phase_index]
            if phase.deferred_count:
                try:
                    tasks = self.resolve(self.phase_index, dict(self.results))
                    if len(tasks) != phase.deferred_count:
                        raise SchedulerError(
                            f"resolver produced {len(tasks)} tasks for phase "
                            f"{phase.name!r}, planned {phase.deferred_count}"
                        )
                except Exception as exc:
                    # a failing resolver is the run's failure, not a worker's
                    self.fatal = exc
                    self.all_done.set()
                    return
            else:
                tasks = phase.tasks
            self._enter_phase_locked(tasks)
            # drain tasks already completed in the store before workers see them
            self._skip_completed_locked()
            if self.pending or self.in_flight:
                return
            # whole phase was already done (resumed run)

    def _skip_completed_locked(self) -> None:
        kept: deque[TrainingTask] = deque()
        for task in self.pending:
            metric = self.recovery.completed.get(task.task_id)
            if metric is None:
                kept.append(task)
                continue
            ref = self.store.checkpoint_ref(task.task_id, task.epochs)
            self.results[task.task_id] = TaskResult(task.task_id, metric, task.epochs, ref)
            self.phase_done += 1
            stamp = time.monotonic()
            self.trace.append(TraceEntry(task.task_id, "-", stamp, stamp, skipped=True))
            self._emit_progress_locked()
        self.pending = kept

    def _emit_progress_locked(self) -> None:
        if self.on_progress is not None:
            self.on_progress(self.phase_index + 1, self.phase_done, self.phase_total)

    def _phase_finished_locked(self) -> None:
        if self.pending or self.in_flight:
            return
        if self.failed:
            self.all_done.set()
            return
        self._advance_locked()

    # -- worker-facing operations ---------------------------------------------

    def next_action(self, worker_id: str):
        """('task', task) to run one, ('wait',) to poll later, ('shutdown',) to exit."""
        with self.lock:
            if self.fatal is not None or self.all_done.is_set():
                return ("shutdown",)
            if not self.pending:
                if self.in_flight:
                    return ("wait",)
                self._phase_finished_locked()
                if self.all_done.is_set():
                    return ("shutdown",)
                if not self.pending:
                    return ("wait",)
            task = self.pending.popleft()
            resume = self.store.latest_model_epoch(task.task_id)
            if resume:
                task = task.with_resume(min(resume, task.epochs))
            self.in_flight[task.task_id] = task
            self._append_locked(task, "started", epoch=task.resume_from_epoch)
            return ("task", task)

    def report_progress(self, task: TrainingTask, epoch: int, metric: float) -> None:
        with self.lock:
            if self.fatal is not None:
                return
            self._append_locked(task, "epoch", epoch=epoch, metric=metric)

    def report_done(self, task: TrainingTask, result: TaskResult, entry: TraceEntry) -> None:
        with self.lock:
            self.trace.append(entry)
            if self.fatal is not None:
                return
            self.in_flight.pop(task.task_id, None)
            if task.task_id in self.results:
                # duplicate completion (e.g. worker declared lost, then its
                # result arrived anyway): first one wins, metrics are equal
                return
            self.results[task.task_id] = result
            self.phase_done += 1
            self._append_locked(
                task, "completed", epoch=result.epochs_completed, metric=result.metric
            )
            self._emit_progress_locked()
            self._phase_finished_locked()

    def report_failed(self, task: TrainingTask, message: str) -> None:
        with self.lock:
            if self.fatal is not None:
                return
            self.in_flight.pop(task.task_id, None)
            self._append_locked(task, "failed", epoch=task.resume_from_epoch, detail=message)
            used = self.attempts.get(task.task_id, 0) + 1
            self.attempts[task.task_id] = used
            if used <= self.retries:
                self.pending.append(task)
            else:
                self.failed[task.task_id] = message
                self.phase_done += 1
                self._phase_finished_locked()

    def requeue(self, task_ids) -> None:
        """Put a lost worker's in-flight tasks back on the queue."""
        with self.lock:
            for task_id in task_ids:
                task = self.in_flight.pop(task_id, None)
                if task is not None and task_id not in self.results:
                    self.pending.append(task)

    def abort(self, exc: BaseException) -> None:
        with self.lock:
            if self.fatal is None:
                self.fatal = exc
            self.all_done.set()

    def _append_locked(self, task: TrainingTask, status: str, epoch=0, metric=None, detail=None):
        self.store.append(
            MetadataRecord(
                run_id=task.run_id,
                task_id=task.task_id,
                status=status,
                config_index=task.config.index,
                test_fold=task.test_fold,
                val_fold=task.val_fold,
                epoch=epoch,
                metric=metric,
                wall_time=now(),
                detail=detail,
            )
        )

    def finish(self) -> dict[str, TaskResult]:
        if self.fatal is not None:
            raise self.fatal
        if self.failed:
            raise RunFailedError(self.failed)
        return dict(self.results)


def _make_backend(backend_or_factory):
    if callable(backend_or_factory) and not hasattr(backend_or_factory, "run_task"):
        return backend_or_factory()
    return backend_or_factory


def _local_worker(state: _RunState, worker_id: str, backend: Backend, data: DataContext, poll_s):
    try:
        while True:
            action = state.next_action(worker_id)
            if action[0] == "shutdown":
                return
            if action[0] == "wait":
                time.sleep(poll_s)
                continue
            task = action[1]
            started = time.monotonic()
            try:
                result = backend.run_task(
                    task,
                    data,
                    state.store,
                    progress=lambda e, m, _t=task: state.report_progress(_t, e, m),
                )
            except (TrainerFailure, TaskError) as exc:
                state.report_failed(task, str(exc))
                continue
            entry = TraceEntry(task.task_id, worker_id, started, time.monotonic())
            state.report_done(task, result, entry)
    except BaseException as exc:  # propagate kills/interrupts to the manager
        state.abort(exc)
    finally:
        closer = getattr(backend, "close", None)
        if closer is not None:
            closer()


def dispatch(
    plan: TaskPlan,
    pool: WorkerPool,
    store: CheckpointStore,
    backend,
    *,
    data: DataContext | None = None,
    resolve=None,
    retries: int = 1,
    on_progress=None,
    poll_s: float = 0.005,
    trace_out: list | None = None,
    heartbeat_s: float = 10.0,
    connect_deadline_s: float = 10.0,
) -> dict[str, TaskResult]:
    """Run every task in the plan exactly once; return task_id -> result.

    Tasks already completed in the store are skipped and their stored
    metrics returned. `backend` is a Backend or a zero-argument factory
    (stateful backends get one instance per worker slot). `resolve` is
    called at each deferred-phase barrier with (phase_index, results so
    far) and must return the phase's tasks.
    """
    if resolve is None:
        resolve = lambda phase, results: ()
    data = data if data is not None else DataContext()
    state = _RunState(plan, store, resolve, retries, on_progress)
    if state.all_done.is_set():
        return state.finish()

    if pool.is_local:
        threads = []
        for spec in pool.workers:
            for slot in range(spec.slots):
                backend_inst = _make_backend(backend)
                name = spec.worker_id if spec.slots == 1 else f"{spec.worker_id}.{slot}"
                thread = threading.Thread(
                    target=_local_worker,
                    args=(state, name, backend_inst, data, poll_s),
                    daemon=True,
                )
                thread.start()
                threads.append(thread)
        for thread in threads:
            thread.join()
    else:
        _run_remote_manager(state, pool, heartbeat_s, connect_deadline_s, poll_s)

    if trace_out is not None:
        trace_out.extend(state.trace)
    return state.finish()


# -- remote transport -------------------------------------------------------


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, port = endpoint.rsplit(":", 1)
    return host, int(port)


def _manager_connection(state: _RunState, spec: WorkerSpec, sock: socket.socket, heartbeat_s):
    """Serve one worker connection; requeue its tasks if it goes quiet."""
    mine: set[str] = set()
    sock.settimeout(3 * heartbeat_s)
    try:
        hello = recv_frame(sock)
        if hello is None or hello.get("type") != "hello":
            raise SchedulerError(f"worker {spec.worker_id}: expected hello")
        while True:
            frame = recv_frame(sock)
            if frame is None:
                break
            kind = frame.get("type")
            if kind == "heartbeat":
                continue
            if kind == "request":
                action = state.next_action(spec.worker_id)
                if action[0] == "task":
                    task = action[1]
                    mine.add(task.task_id)
                    send_frame(sock, {"type": "assign", "task": task_to_wire(task)})
                elif action[0] == "wait":
                    send_frame(sock, {"type": "wait"})
                else:
                    send_frame(sock, {"type": "shutdown"})
                    break
            elif kind == "progress":
                task = state.in_flight.get(frame.get("task_id"))
                if task is not None:
                    state.report_progress(task, int(frame["epoch"]), float(frame["metric"]))
            elif kind == "done":
                task_id = frame.get("task_id")
                task = state.in_flight.get(task_id)
                if task is not None:
                    result = TaskResult(
                        task_id,
                        float(frame["metric"]),
                        task.epochs,
                        str(frame.get("checkpoint_ref", "")),
                    )
                    entry = TraceEntry(
                        task_id,
                        spec.worker_id,
                        float(frame.get("started", 0.0)),
                        float(frame.get("finished", 0.0)),
                    )
                    state.report_done(task, result, entry)
                mine.discard(task_id)
            elif kind == "failed":
                task = state.in_flight.get(frame.get("task_id"))
                if task is not None:
                    state.report_failed(task, str(frame.get("message", "?")))
                mine.discard(frame.get("task_id"))
            else:
                log.warning("worker %s sent unknown frame %r", spec.worker_id, kind)
    except (OSError, WireError, SchedulerError, ValueError, KeyError) as exc:
        log.warning("worker %s lost: %s", spec.worker_id, exc)
    finally:
        state.requeue(mine)
        sock.close()


def _run_remote_manager(state, pool: WorkerPool, heartbeat_s, connect_deadline_s, poll_s):
    threads: list[threading.Thread] = []
    live = threading.Semaphore(0)
    connected: set[str] = set()

    def dial(spec: WorkerSpec):
        host, port = _parse_endpoint(spec.endpoint)
        deadline = time.monotonic() + connect_deadline_s
        while time.monotonic() < deadline and not state.all_done.is_set():
            try:
                sock = socket.create_connection((host, port), timeout=1.0)
            except OSError:
                time.sleep(0.05)
                continue
            connected.add(spec.worker_id)
            live.release()
            _manager_connection(state, spec, sock, heartbeat_s)
            return
        log.warning("worker %s never answered at %s", spec.worker_id, spec.endpoint)

    for spec in pool.workers:
        thread = threading.Thread(target=dial, args=(spec,), daemon=True)
        thread.start()
        threads.append(thread)
    for thread in threads:
        thread.join()
    if not state.all_done.is_set():
        if not connected:
            state.abort(AllWorkersLost("no worker ever connected"))
        else:
            state.abort(AllWorkersLost("all workers lost before the plan finished"))


def serve_worker(
    listen: str,
    backend,
    store: CheckpointStore,
    data: DataContext | None = None,
    *,
    worker_id: str = "worker",
    slots: int = 1,
    heartbeat_s: float = 10.0,
    poll_s: float = 0.05,
    ready: threading.Event | None = None,
) -> None:
    """Listen for the manager, then pull and run tasks until shutdown."""
    data = data if data is not None else DataContext()
    host, port = _parse_endpoint(listen)
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(1)
    if ready is not None:
        ready.set()
    sock, _addr = server.accept()
    server.close()

    send_lock = threading.Lock()
    inbox: "deque[dict]" = deque()
    inbox_ready = threading.Condition()
    stop = threading.Event()

    def send(payload: dict) -> None:
        with send_lock:
            send_frame(sock, payload)

    def reader():
        try:
            while not stop.is_set():
                frame = recv_frame(sock)
                if frame is None:
                    frame = {"type": "shutdown"}
                with inbox_ready:
                    inbox.append(frame)
                    inbox_ready.notify()
                if frame.get("type") == "shutdown":
                    return
        except OSError:
            with inbox_ready:
                inbox.append({"type": "shutdown"})
                inbox_ready.notify()

    def heartbeats():
        while not stop.wait(heartbeat_s):
            try:
                send({"type": "heartbeat", "worker_id": worker_id})
            except OSError:
                return

    def take_reply() -> dict:
        with inbox_ready:
            while not inbox:
                inbox_ready.wait()
            return inbox.popleft()

    def slot_loop(slot_backend):
        try:
            while not stop.is_set():
                send({"type": "request", "worker_id": worker_id})
                reply = take_reply()
                kind = reply.get("type")
                if kind == "shutdown":
                    with inbox_ready:
                        inbox.append(reply)  # let sibling slots see it too
                        inbox_ready.notify()
                    stop.set()
                    return
                if kind == "wait":
                    time.sleep(poll_s)
                    continue
                if kind != "assign":
                    continue
                task = task_from_wire(reply["task"])
                started = time.monotonic()
                try:
                    result = slot_backend.run_task(
                        task,
                        data,
                        store,
                        progress=lambda e, m, _t=task.task_id: send(
                            {"type": "progress", "task_id": _t, "epoch": e, "metric": m}
                        ),
                    )
                except (TrainerFailure, TaskError) as exc:
                    send({"type": "failed", "task_id": task.task_id, "message": str(exc)})
                    continue
                send(
                    {
                        "type": "done",
                        "task_id": task.task_id,
                        "metric": result.metric,
                        "checkpoint_ref": result.checkpoint_ref,
                        "started": started,
                        "finished": time.monotonic(),
                    }
                )
        except OSError:
            stop.set()
        finally:
            closer = getattr(slot_backend, "close", None)
            if closer is not None:
                closer()

    reader_thread = threading.Thread(target=reader, daemon=True)
    reader_thread.start()
    beat_thread = threading.Thread(target=heartbeats, daemon=True)
    beat_thread.start()
    send({"type": "hello", "worker_id": worker_id, "slots": slots})

    slot_threads = []
    for _ in range(slots):
        thread = threading.Thread(target=slot_loop, args=(_make_backend(backend),), daemon=True)
        thread.start()
        slot_threads.append(thread)
    for thread in slot_threads:
        thread.join()
    stop.set()
    sock.close()

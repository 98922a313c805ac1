"""Dispatch semantics: pull scheduling, retries, barriers, remote workers."""

import socket
import threading
import time
from dataclasses import dataclass, field

import pytest

from nestcv.checkpoint import CheckpointStore
from nestcv.hpspace import HyperparameterConfig
from nestcv.scheduler import (
    AllWorkersLost,
    MakespanReport,
    PlannedPhase,
    RunFailedError,
    SchedulerError,
    TaskPlan,
    TraceEntry,
    WorkerPool,
    WorkerSpec,
    dispatch,
    makespan_report,
    order_tasks,
    parse_pool,
    serve_worker,
)
from nestcv.trainer import (
    FINAL_TRAIN,
    TRAIN_TEST,
    TRAIN_VAL,
    DataContext,
    MockBackend,
    TaskError,
    TrainerFailure,
    TrainingTask,
    mock_metric,
)
from nestcv.wire import recv_frame, send_frame


def cfg(index):
    return HyperparameterConfig(index=index, values=(("lr", "0.01"),))


def tv_task(index, val_fold=1, run_id="sr", epochs=3, seed=0):
    folds = tuple(f for f in range(4) if f != val_fold)
    return TrainingTask(
        run_id=run_id,
        config=cfg(index),
        mode=TRAIN_VAL,
        train_folds=folds,
        epochs=epochs,
        val_fold=val_fold,
        seed=seed,
    )


def flat_plan(n_tasks, run_id="sr", epochs=3):
    tasks = tuple(tv_task(j, run_id=run_id, epochs=epochs) for j in range(n_tasks))
    return TaskPlan(run_id=run_id, phases=(PlannedPhase("train_val", tasks),))


# -- pools and plans ---------------------------------------------------------


def test_pool_local():
    pool = WorkerPool.local(3)
    assert pool.total_slots == 3
    assert pool.is_local
    assert parse_pool("local:3") == pool


def test_pool_rejects_duplicates_and_empty():
    with pytest.raises(SchedulerError, match="unique"):
        WorkerPool((WorkerSpec("w", 1), WorkerSpec("w", 1)))
    with pytest.raises(SchedulerError, match="at least one slot"):
        WorkerPool((WorkerSpec("w", 0),))


def test_pool_file_parsing(tmp_path):
    path = tmp_path / "pool"
    path.write_text("# my workers\nw0 127.0.0.1:9000 2\n\nw1 127.0.0.1:9001 1\n")
    pool = WorkerPool.parse_file(path)
    assert pool.total_slots == 3
    assert not pool.is_local
    assert pool.workers[0] == WorkerSpec("w0", 2, "127.0.0.1:9000")


def test_pool_file_errors(tmp_path):
    bad = tmp_path / "pool"
    bad.write_text("w0 localhost 1\n")
    with pytest.raises(SchedulerError, match="bad endpoint"):
        WorkerPool.parse_file(bad)
    bad.write_text("w0 h:1 lots\n")
    with pytest.raises(SchedulerError, match="bad slots"):
        WorkerPool.parse_file(bad)
    bad.write_text("w0 h:1\n")
    with pytest.raises(SchedulerError, match="line 1"):
        WorkerPool.parse_file(bad)


def test_order_tasks_longest_first():
    final = TrainingTask(
        run_id="r", config=cfg(0), mode=FINAL_TRAIN, train_folds=(0, 1, 2, 3), epochs=1
    )
    tt = TrainingTask(
        run_id="r", config=cfg(1), mode=TRAIN_TEST, train_folds=(0, 1, 2), epochs=1, test_fold=3
    )
    tv = tv_task(2)
    ordered = order_tasks([tv, tt, final])
    assert [t.mode for t in ordered] == [FINAL_TRAIN, TRAIN_TEST, TRAIN_VAL]
    # ties break on task id
    tt2 = TrainingTask(
        run_id="r", config=cfg(0), mode=TRAIN_TEST, train_folds=(0, 1, 2), epochs=1, test_fold=3
    )
    assert [t.config.index for t in order_tasks([tt, tt2])] == [0, 1]


def test_plan_rejects_duplicate_task_ids():
    task = tv_task(0)
    with pytest.raises(SchedulerError, match="duplicate task id"):
        TaskPlan(run_id="sr", phases=(PlannedPhase("p", (task, task)),))


def test_plan_total_counts_deferred():
    plan = TaskPlan(
        run_id="sr",
        phases=(
            PlannedPhase("a", tuple(tv_task(j) for j in range(3))),
            PlannedPhase("b", deferred_count=4),
        ),
    )
    assert plan.total_tasks() == 7


# -- local dispatch ----------------------------------------------------------


def test_dispatch_runs_everything(tmp_path):
    store = CheckpointStore(tmp_path)
    plan = flat_plan(6)
    results = dispatch(plan, WorkerPool.local(2), store, MockBackend())
    assert len(results) == 6
    for task in plan.phases[0].tasks:
        assert results[task.task_id].metric == mock_metric(0, task)
    records = store.read_records("sr")
    assert sum(1 for r in records if r.status == "completed") == 6
    assert sum(1 for r in records if r.status == "started") == 6


def test_dispatch_worker_count_invariance(tmp_path):
    results = {}
    for g in (1, 2, 4):
        store = CheckpointStore(tmp_path / f"g{g}")
        results[g] = {
            tid: r.metric
            for tid, r in dispatch(
                flat_plan(8), WorkerPool.local(g), store, MockBackend()
            ).items()
        }
    assert results[1] == results[2] == results[4]


def test_dispatch_skips_completed(tmp_path):
    store = CheckpointStore(tmp_path)
    first = dispatch(flat_plan(3), WorkerPool.local(1), store, MockBackend())
    # rerun with a larger plan sharing those three tasks
    rerun = dispatch(flat_plan(6), WorkerPool.local(2), store, MockBackend())
    assert len(rerun) == 6
    for task_id, result in first.items():
        assert rerun[task_id].metric == result.metric
    completed = [r for r in store.read_records("sr") if r.status == "completed"]
    assert len(completed) == 6  # the three re-used tasks were not re-run


def test_dispatch_fully_completed_run_is_noop(tmp_path):
    store = CheckpointStore(tmp_path)
    dispatch(flat_plan(4), WorkerPool.local(2), store, MockBackend())
    before = len(store.read_records())
    again = dispatch(flat_plan(4), WorkerPool.local(2), store, MockBackend())
    assert len(again) == 4
    assert len(store.read_records()) == before


def test_dispatch_resumes_partial_task(tmp_path):
    store = CheckpointStore(tmp_path)
    task = tv_task(0, epochs=5)
    # a previous attempt saved epoch 2
    store.save_model(task.task_id, 2, b"mock|leftover")
    plan = TaskPlan(run_id="sr", phases=(PlannedPhase("p", (task,)),))
    epochs_seen = []

    class Spy(MockBackend):
        def run_task(self, task, data, store, progress=None):
            def spy_progress(epoch, metric):
                epochs_seen.append(epoch)
                if progress:
                    progress(epoch, metric)

            return super().run_task(task, data, store, spy_progress)

    results = dispatch(plan, WorkerPool.local(1), store, Spy())
    assert epochs_seen == [3, 4, 5]  # resumed after the surviving blob
    assert results[task.task_id].metric == mock_metric(0, task)


def test_dispatch_progress_callback(tmp_path):
    store = CheckpointStore(tmp_path)
    events = []
    dispatch(
        flat_plan(3),
        WorkerPool.local(1),
        store,
        MockBackend(),
        on_progress=lambda phase, done, total: events.append((phase, done, total)),
    )
    assert events == [(1, 1, 3), (1, 2, 3), (1, 3, 3)]


@dataclass
class FlakyBackend:
    """Fails the first attempt of every task, then defers to the mock."""

    fail_times: int = 1
    seen: dict = field(default_factory=dict)
    inner: MockBackend = field(default_factory=MockBackend)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def run_task(self, task, data, store, progress=None):
        with self.lock:
            used = self.seen.get(task.task_id, 0)
            self.seen[task.task_id] = used + 1
        if used < self.fail_times:
            raise TrainerFailure("synthetic flake")
        return self.inner.run_task(task, data, store, progress)


def test_dispatch_retries_flaky_tasks(tmp_path):
    store = CheckpointStore(tmp_path)
    results = dispatch(flat_plan(4), WorkerPool.local(2), store, FlakyBackend(), retries=1)
    assert len(results) == 4
    records = store.read_records("sr")
    assert sum(1 for r in records if r.status == "failed") == 4
    assert sum(1 for r in records if r.status == "completed") == 4


def test_dispatch_exhausted_retries_fail_run(tmp_path):
    store = CheckpointStore(tmp_path)
    with pytest.raises(RunFailedError) as err:
        dispatch(flat_plan(2), WorkerPool.local(1), store, FlakyBackend(fail_times=5), retries=2)
    assert len(err.value.incomplete) >= 1
    assert "synthetic flake" in next(iter(err.value.incomplete.values()))


def test_dispatch_task_error_not_retried(tmp_path):
    store = CheckpointStore(tmp_path)
    calls = []

    class Broken:
        def run_task(self, task, data, store, progress=None):
            calls.append(task.task_id)
            raise TaskError("bad task")

    with pytest.raises(RunFailedError):
        dispatch(flat_plan(1), WorkerPool.local(1), store, Broken(), retries=0)
    assert len(calls) == 1


def test_dispatch_base_exception_propagates(tmp_path):
    # kill-style exceptions must abort the whole run, not trigger retries
    store = CheckpointStore(tmp_path)

    class Killed(BaseException):
        pass

    class Killer:
        def run_task(self, task, data, store, progress=None):
            raise Killed()

    with pytest.raises(Killed):
        dispatch(flat_plan(3), WorkerPool.local(2), store, Killer())


def test_dispatch_backend_factory_one_instance_per_slot(tmp_path):
    store = CheckpointStore(tmp_path)
    instances = []

    def factory():
        backend = MockBackend()
        instances.append(backend)
        return backend

    dispatch(flat_plan(4), WorkerPool.local(3), store, factory)
    assert len(instances) == 3


def test_dispatch_closes_backends(tmp_path):
    store = CheckpointStore(tmp_path)
    closed = []

    class Closeable(MockBackend):
        def close(self):
            closed.append(True)

    dispatch(flat_plan(2), WorkerPool.local(2), store, lambda: Closeable())
    assert len(closed) == 2


# -- barriers and resolvers --------------------------------------------------


def test_deferred_phase_resolver_sees_prior_results(tmp_path):
    store = CheckpointStore(tmp_path)
    phase1 = tuple(tv_task(j) for j in range(3))
    seen = {}

    def resolve(phase_index, results):
        seen["phase"] = phase_index
        seen["results"] = dict(results)
        best = max(sorted(results), key=lambda tid: results[tid].metric)
        index = int(best.split("cfg")[1].split("/")[0])
        return (
            TrainingTask(
                run_id="sr",
                config=cfg(index),
                mode=TRAIN_TEST,
                train_folds=(0, 1, 2),
                epochs=3,
                test_fold=3,
            ),
        )

    plan = TaskPlan(
        run_id="sr",
        phases=(PlannedPhase("search", phase1), PlannedPhase("test", deferred_count=1)),
    )
    results = dispatch(plan, WorkerPool.local(2), store, MockBackend(), resolve=resolve)
    assert seen["phase"] == 1
    assert len(seen["results"]) == 3
    assert len(results) == 4


def test_resolver_failure_is_fatal(tmp_path):
    store = CheckpointStore(tmp_path)

    def resolve(phase_index, results):
        raise ValueError("resolver exploded")

    plan = TaskPlan(
        run_id="sr",
        phases=(
            PlannedPhase("search", (tv_task(0),)),
            PlannedPhase("test", deferred_count=1),
        ),
    )
    with pytest.raises(ValueError, match="resolver exploded"):
        dispatch(plan, WorkerPool.local(2), store, MockBackend(), resolve=resolve)


def test_resolver_count_mismatch_is_fatal(tmp_path):
    store = CheckpointStore(tmp_path)
    plan = TaskPlan(
        run_id="sr",
        phases=(
            PlannedPhase("search", (tv_task(0),)),
            PlannedPhase("test", deferred_count=2),
        ),
    )
    with pytest.raises(SchedulerError, match="resolver produced 1 tasks"):
        dispatch(
            plan,
            WorkerPool.local(1),
            store,
            MockBackend(),
            resolve=lambda phase, results: (tv_task(9, val_fold=2),),
        )


def test_phase_barrier_orders_execution(tmp_path):
    store = CheckpointStore(tmp_path)
    order = []

    class Recording(MockBackend):
        def run_task(self, task, data, store, progress=None):
            order.append(task.mode)
            return super().run_task(task, data, store, progress)

    phase1 = tuple(tv_task(j) for j in range(4))
    phase2 = (
        TrainingTask(
            run_id="sr", config=cfg(0), mode=TRAIN_TEST, train_folds=(0, 1, 2), epochs=3, test_fold=3
        ),
    )
    plan = TaskPlan(
        run_id="sr", phases=(PlannedPhase("search", phase1), PlannedPhase("test", phase2))
    )
    dispatch(plan, WorkerPool.local(4), store, lambda: Recording())
    assert order[-1] == TRAIN_TEST
    assert order[:4].count(TRAIN_VAL) == 4


# -- makespan ----------------------------------------------------------------


def test_makespan_report_math():
    trace = [
        TraceEntry("a", "w0", 0.0, 2.0),
        TraceEntry("b", "w1", 0.0, 1.0),
        TraceEntry("c", "w1", 1.0, 2.0),
        TraceEntry("skip", "-", 0.0, 0.0, skipped=True),
    ]
    report = makespan_report(trace)
    assert report.wall_time == 2.0
    assert report.serial_time == 4.0
    assert report.speedup == 2.0
    assert report.longest_task == 2.0
    assert report.per_worker_busy == {"w0": 2.0, "w1": 2.0}


def test_makespan_report_empty():
    report = makespan_report([])
    assert report == MakespanReport(0.0, 0.0, {}, 1.0, 0.0)


def test_parallel_speedup_with_synthetic_delays(tmp_path):
    # 16 equal tasks of ~100 ms on 4 slots: list scheduling promises
    # wall <= serial/g + longest; measure generously for scheduling overhead
    store = CheckpointStore(tmp_path)
    trace = []
    started = time.monotonic()
    dispatch(
        flat_plan(16, epochs=1),
        WorkerPool.local(4),
        store,
        lambda: MockBackend(delay_s=0.1),
        trace_out=trace,
    )
    wall = time.monotonic() - started
    report = makespan_report(trace)
    assert report.serial_time >= 1.4  # 16 x 100 ms of real work happened
    assert wall <= 0.5, f"wall {wall:.3f}s exceeds 500 ms budget"
    assert report.speedup >= 3.6, f"speedup {report.speedup:.2f} below 3.6"
    assert report.wall_time <= report.serial_time / 4 + report.longest_task + 0.05


# -- remote workers ----------------------------------------------------------


def free_port():
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        return probe.getsockname()[1]


def start_worker(listen, store_root, worker_id, slots=1, heartbeat_s=5.0, delay_s=0.0):
    ready = threading.Event()
    thread = threading.Thread(
        target=serve_worker,
        args=(listen, MockBackend(delay_s=delay_s), CheckpointStore(store_root)),
        kwargs=dict(worker_id=worker_id, slots=slots, heartbeat_s=heartbeat_s, ready=ready),
        daemon=True,
    )
    thread.start()
    assert ready.wait(5.0)
    return thread


def test_remote_dispatch_matches_local(tmp_path):
    local_store = CheckpointStore(tmp_path / "local")
    local = dispatch(flat_plan(6), WorkerPool.local(2), local_store, MockBackend())

    ports = [free_port(), free_port()]
    threads = [
        start_worker(f"127.0.0.1:{ports[0]}", tmp_path / "remote", "w0"),
        start_worker(f"127.0.0.1:{ports[1]}", tmp_path / "remote", "w1"),
    ]
    pool = WorkerPool(
        (
            WorkerSpec("w0", 1, f"127.0.0.1:{ports[0]}"),
            WorkerSpec("w1", 1, f"127.0.0.1:{ports[1]}"),
        )
    )
    store = CheckpointStore(tmp_path / "remote")
    remote = dispatch(flat_plan(6), pool, store, MockBackend())
    for thread in threads:
        thread.join(timeout=5.0)
    assert {t: r.metric for t, r in remote.items()} == {
        t: r.metric for t, r in local.items()
    }
    records = store.read_records("sr")
    assert sum(1 for r in records if r.status == "completed") == 6


def test_remote_worker_multiple_slots(tmp_path):
    port = free_port()
    start_worker(f"127.0.0.1:{port}", tmp_path, "w0", slots=3)
    pool = WorkerPool((WorkerSpec("w0", 3, f"127.0.0.1:{port}"),))
    results = dispatch(flat_plan(9), pool, CheckpointStore(tmp_path), MockBackend())
    assert len(results) == 9


def test_remote_late_joining_worker(tmp_path):
    ports = [free_port(), free_port()]
    start_worker(f"127.0.0.1:{ports[0]}", tmp_path, "w0", delay_s=0.05)

    def late():
        time.sleep(0.4)
        start_worker(f"127.0.0.1:{ports[1]}", tmp_path, "w1", delay_s=0.05)

    threading.Thread(target=late, daemon=True).start()
    pool = WorkerPool(
        (
            WorkerSpec("w0", 1, f"127.0.0.1:{ports[0]}"),
            WorkerSpec("w1", 1, f"127.0.0.1:{ports[1]}"),
        )
    )
    trace = []
    results = dispatch(
        flat_plan(12),
        pool,
        CheckpointStore(tmp_path),
        MockBackend(),
        connect_deadline_s=5.0,
        trace_out=trace,
    )
    assert len(results) == 12
    late_entries = [e for e in trace if e.worker_id == "w1" and not e.skipped]
    assert late_entries, "the late worker should have picked up tasks"


def test_remote_no_worker_raises_all_lost(tmp_path):
    pool = WorkerPool((WorkerSpec("w0", 1, f"127.0.0.1:{free_port()}"),))
    with pytest.raises(AllWorkersLost, match="no worker ever connected"):
        dispatch(
            flat_plan(2),
            pool,
            CheckpointStore(tmp_path),
            MockBackend(),
            connect_deadline_s=0.3,
        )


def test_remote_dying_worker_tasks_requeued(tmp_path):
    """A worker that takes a task and vanishes must not lose the task."""
    traitor_port = free_port()
    honest_port = free_port()

    def traitor():
        # speaks just enough protocol to steal one task, then drops dead
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(("127.0.0.1", traitor_port))
        server.listen(1)
        sock, _ = server.accept()
        server.close()
        send_frame(sock, {"type": "hello", "worker_id": "traitor", "slots": 1})
        send_frame(sock, {"type": "request", "worker_id": "traitor"})
        reply = recv_frame(sock)
        assert reply["type"] in ("assign", "wait", "shutdown")
        sock.close()  # dies with the task in hand

    traitor_thread = threading.Thread(target=traitor, daemon=True)
    traitor_thread.start()
    start_worker(f"127.0.0.1:{honest_port}", tmp_path, "honest", delay_s=0.02)

    pool = WorkerPool(
        (
            WorkerSpec("traitor", 1, f"127.0.0.1:{traitor_port}"),
            WorkerSpec("honest", 1, f"127.0.0.1:{honest_port}"),
        )
    )
    store = CheckpointStore(tmp_path)
    results = dispatch(flat_plan(5), pool, store, MockBackend(), connect_deadline_s=5.0)
    traitor_thread.join(timeout=5.0)
    assert len(results) == 5
    completed = [r for r in store.read_records("sr") if r.status == "completed"]
    assert len(completed) == 5


def test_remote_heartbeats_cover_long_tasks(tmp_path):
    # one slow task (0.5 s) with heartbeat_s=0.1: the 3-beat timeout (0.3 s)
    # would fire without heartbeats flowing during the task
    port = free_port()
    start_worker(f"127.0.0.1:{port}", tmp_path, "w0", heartbeat_s=0.1, delay_s=0.5)
    pool = WorkerPool((WorkerSpec("w0", 1, f"127.0.0.1:{port}"),))
    store = CheckpointStore(tmp_path)
    results = dispatch(
        flat_plan(1, epochs=1), pool, store, MockBackend(), heartbeat_s=0.1
    )
    assert len(results) == 1
    completed = [r for r in store.read_records("sr") if r.status == "completed"]
    assert len(completed) == 1

#!/usr/bin/env python3
"""Measure scheduling speedup on synthetic equal-length tasks.

Dispatches the same batch of delayed mock tasks at several worker counts
and prints wall time, speedup, and the list-scheduling bound
(serial/g + longest task) for each.
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nestcv.checkpoint import CheckpointStore
from nestcv.hpspace import HyperparameterConfig
from nestcv.scheduler import PlannedPhase, TaskPlan, WorkerPool, dispatch, makespan_report
from nestcv.trainer import MockBackend, TrainingTask


def batch(n_tasks: int) -> TaskPlan:
    tasks = tuple(
        TrainingTask(
            run_id="bench",
            config=HyperparameterConfig(index=j, values=()),
            mode="train_val",
            train_folds=(0,),
            epochs=1,
            val_fold=1,
        )
        for j in range(n_tasks)
    )
    return TaskPlan(run_id="bench", phases=(PlannedPhase("train_val", tasks),))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--tasks", type=int, default=16)
    parser.add_argument("--task-seconds", type=float, default=0.1)
    parser.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    args = parser.parse_args(argv)

    print(f"{args.tasks} tasks x {args.task_seconds * 1000:.0f} ms each")
    print(f"{'g':>3} {'wall_s':>8} {'speedup':>8} {'bound_s':>8}")
    for g in args.workers:
        with tempfile.TemporaryDirectory() as tmp:
            store = CheckpointStore(Path(tmp))
            trace = []
            started = time.monotonic()
            dispatch(
                batch(args.tasks),
                WorkerPool.local(g),
                store,
                lambda: MockBackend(delay_s=args.task_seconds),
                trace_out=trace,
            )
            wall = time.monotonic() - started
            report = makespan_report(trace)
            bound = report.serial_time / g + report.longest_task
            print(f"{g:>3} {wall:>8.3f} {report.speedup:>8.2f} {bound:>8.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 a run that started
but could not complete (failed tasks, lost workers). Progress lines are
machine-parseable: `PROGRESS phase=1 done=37/108`.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointStore, CorruptLogError
from .engine import (
    DachosReport,
    EngineError,
    NachosReport,
    load_matrix_file,
    plan_dachos,
    plan_nachos,
    reconstruct_report,
    replay_dachos,
    replay_nachos,
    report_to_json,
    resolve_configs,
    run_job,
    run_progress,
    write_report,
)
from .exechost import ExecBackend
from .jobspec import UsageError, load_jobspec
from .learner import TinyLearnerBackend
from .manifest import ManifestError, load_manifest
from .partition import load_assignment
from .scheduler import AllWorkersLost, RunFailedError, SchedulerError, serve_worker
from .trainer import DataContext, MockBackend

STORE_ENV = "NESTCV_STORE"


def _print_report_summary(report) -> None:
    if isinstance(report, NachosReport):
        for fold in report.folds:
            vbar = "-" if fold.mean_validation is None else f"{fold.mean_validation:.4f}"
            print(
                f"fold {fold.test_fold}: config {fold.selected_config} "
                f"(validation {vbar}) test {fold.test_metric:.4f}"
            )
        print(f"test summary: {report.test_summary.display()}")
    elif isinstance(report, DachosReport):
        selection = report.selection
        print(
            f"selected config {selection.jstar}: validation {selection.vbar_star:.4f} "
            f"(runner-up gap {selection.runner_up_gap:.4f})"
        )
        if report.artifact is not None:
            print(f"model artifact: {report.artifact.artifact_ref}")


def cmd_run(args) -> int:
    spec = load_jobspec(args.spec)
    if args.store or os.environ.get(STORE_ENV):
        spec = replace(spec, store=args.store or os.environ[STORE_ENV])
    if args.pool:
        spec = replace(spec, pool=args.pool)

    def on_progress(phase, done, total):
        print(f"PROGRESS phase={phase} done={done}/{total}", flush=True)

    report, path = run_job(spec, on_progress=on_progress)
    _print_report_summary(report)
    print(f"report: {path}")
    return 0


def cmd_replay(args) -> int:
    matrix, test_rows = load_matrix_file(args.matrix)
    if args.mode == "nachos":
        report = replay_nachos(matrix, test_rows)
    else:
        report = replay_dachos(matrix)
    _print_report_summary(report)
    if args.out:
        write_report(report, args.out)
        print(f"report: {args.out}")
    return 0


def cmd_plan(args) -> int:
    spec = load_jobspec(args.spec)
    configs = resolve_configs(spec)
    seed = spec.seeds["trainer"]
    if spec.algorithm == "nachos":
        plan = plan_nachos(spec.run_id, configs, spec.k, spec.epochs, seed)
    else:
        plan = plan_dachos(spec.run_id, configs, spec.k, spec.epochs, seed)
    for number, phase in enumerate(plan.phases, 1):
        note = " (configured at the barrier)" if phase.deferred_count else ""
        print(f"phase {number} {phase.name}: {phase.size()} tasks{note}")
    print(f"total: {plan.total_tasks()} tasks")
    return 0


def cmd_report(args) -> int:
    store_root = args.store or os.environ.get(STORE_ENV)
    if not store_root:
        raise UsageError("report needs --store or the store environment override")
    with CheckpointStore(store_root) as store:
        progress = run_progress(store, args.run_id)
        if any(done < total for _, done, total in progress):
            for name, done, total in progress:
                pct = 100.0 * done / total if total else 100.0
                print(f"phase {name}: {done}/{total} ({pct:.1f}%)")
            print("run in progress (or interrupted); no report yet")
            return 0
        report = reconstruct_report(store, args.run_id)
    _print_report_summary(report)
    if args.out:
        write_report(report, args.out)
        print(f"report: {args.out}")
    else:
        sys.stdout.write(report_to_json(report))
    return 0


def _worker_backend(args):
    if args.backend == "mock":
        return MockBackend(delay_s=args.mock_delay)
    if args.backend == "tiny":
        return TinyLearnerBackend()
    if not args.command:
        raise UsageError("exec backend needs --command")
    return lambda: ExecBackend(command=list(args.command), timeout_s=args.timeout)


def cmd_worker(args) -> int:
    store_root = args.store or os.environ.get(STORE_ENV)
    if not store_root:
        raise UsageError("worker needs --store or the store environment override")
    data = DataContext()
    if args.manifest:
        data.manifest = load_manifest(args.manifest)
        data.manifest_path = str(Path(args.manifest))
    if args.folds:
        data.folds = load_assignment(args.folds)
        data.folds_path = str(Path(args.folds))
    backend = _worker_backend(args)
    with CheckpointStore(store_root) as store:
        serve_worker(
            args.listen,
            backend,
            store,
            data,
            worker_id=args.worker_id,
            slots=args.slots,
            heartbeat_s=args.heartbeat,
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestcv",
        description="Fault-tolerant nested cross-validation runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a job spec end to end")
    run.add_argument("--spec", required=True, help="path to the job spec (JSON)")
    run.add_argument("--store", default=None, help="override the spec's store root")
    run.add_argument("--pool", default=None, help="override the spec's worker pool")
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="selection and stats from a metric matrix file")
    replay.add_argument("--matrix", required=True, help="matrix fixture path")
    replay.add_argument("--mode", choices=("nachos", "dachos"), required=True)
    replay.add_argument("--out", default=None, help="also write the report here")
    replay.set_defaults(func=cmd_replay)

    plan = sub.add_parser("plan", help="print the task plan without executing")
    plan.add_argument("--spec", required=True)
    plan.set_defaults(func=cmd_plan)

    report = sub.add_parser("report", help="rebuild a run's report from its store")
    report.add_argument("--store", default=None)
    report.add_argument("--run-id", required=True)
    report.add_argument("--out", default=None)
    report.set_defaults(func=cmd_report)

    worker = sub.add_parser("worker", help="serve one worker until shutdown")
    worker.add_argument("--listen", required=True, help="host:port to listen on")
    worker.add_argument("--backend", choices=("mock", "tiny", "exec"), default="mock")
    worker.add_argument("--store", default=None)
    worker.add_argument("--manifest", default=None)
    worker.add_argument("--folds", default=None)
    worker.add_argument("--worker-id", default="worker")
    worker.add_argument("--slots", type=int, default=1)
    worker.add_argument("--heartbeat", type=float, default=10.0)
    worker.add_argument("--mock-delay", type=float, default=0.0)
    worker.add_argument("--timeout", type=float, default=None)
    worker.add_argument("--command", nargs=argparse.REMAINDER, default=None)
    worker.set_defaults(func=cmd_worker)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, EngineError, ManifestError, CorruptLogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunFailedError, AllWorkersLost) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    except SchedulerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

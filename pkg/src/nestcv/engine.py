"""Run orchestration: nested benchmarking and deployment selection.

Two run shapes share the machinery. The benchmarking run ("nachos") rotates
every fold through the test role: for each test fold i it cross-validates
every configuration over the remaining folds, picks the per-fold winner at
the barrier, then trains once on everything but fold i and tests on i; the
k test metrics are summarized as mean with standard error. The deployment
run ("dachos") cross-validates configurations over all k folds, picks one
global winner, and trains the deployable model on the full dataset.

Reports persist full-precision metrics and render a 2-decimal display
string; selection always compares at full precision.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import CheckpointStore
from .exechost import ExecBackend
from .hpspace import (
    HyperparameterConfig,
    SearchSpace,
    default_search_space,
    load_configs,
    sample_configs,
    save_configs,
)
from .jobspec import JobSpec, UsageError, dumps_jobspec, loads_jobspec
from .learner import TinyLearnerBackend
from .manifest import load_manifest, write_manifest
from .partition import PartitionLevel, assign_folds, save_assignment
from .scheduler import PlannedPhase, TaskPlan, WorkerPool, dispatch, parse_pool
from .trainer import (
    FINAL_TRAIN,
    TRAIN_TEST,
    TRAIN_VAL,
    DataContext,
    MockBackend,
    ModelArtifact,
    TrainingTask,
)

REPORT_FORMAT = 1


class EngineError(Exception):
    pass


class MatrixShapeError(EngineError):
    def __init__(self, missing):
        cells = ", ".join(f"(test={t}, config={j}, val={m})" for t, j, m in missing[:8])
        suffix = "..." if len(missing) > 8 else ""
        super().__init__(f"validation matrix missing cells: {cells}{suffix}")
        self.missing = list(missing)


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class SummaryStats:
    count: int
    mean: float
    sample_sd: float
    standard_error: float

    def display(self) -> str:
        return f"{self.mean:.2f} ± {self.standard_error:.2f}"

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "sample_sd": self.sample_sd,
            "standard_error": self.standard_error,
            "display": self.display(),
        }


def summarize_tests(values) -> SummaryStats:
    values = list(values)
    if len(values) < 2:
        raise EngineError(f"need at least 2 values for a summary, got {len(values)}")
    mean = statistics.mean(values)
    sd = statistics.stdev(values)
    return SummaryStats(
        count=len(values), mean=mean, sample_sd=sd, standard_error=sd / math.sqrt(len(values))
    )


# -- selection ----------------------------------------------------------------


@dataclass(frozen=True)
class ConfigSummary:
    config_index: int
    vbar: float


@dataclass(frozen=True)
class SelectionResult:
    jstar: int
    vbar_star: float
    runner_up_gap: float


def select_best(summaries) -> SelectionResult:
    """Argmax of vbar at full precision; exact ties go to the lowest index."""
    summaries = sorted(summaries, key=lambda s: s.config_index)
    if not summaries:
        raise EngineError("cannot select from an empty summary list")
    best = max(summaries, key=lambda s: s.vbar)  # max is stable: first of equals
    others = [s.vbar for s in summaries if s.config_index != best.config_index]
    gap = best.vbar - max(others) if others else 0.0
    return SelectionResult(jstar=best.config_index, vbar_star=best.vbar, runner_up_gap=gap)


# -- validation matrix ----------------------------------------------------------


class ValidationMatrix:
    """Cells keyed by (test fold or None, config index, validation fold)."""

    def __init__(self):
        self._cells: dict[tuple[int | None, int, int], float] = {}

    def add(self, test_fold: int | None, config_index: int, val_fold: int, metric: float) -> None:
        key = (test_fold, config_index, val_fold)
        if key in self._cells:
            raise EngineError(f"duplicate matrix cell {key}")
        if not 0.0 <= metric <= 1.0:
            raise EngineError(f"metric {metric} outside [0, 1] at cell {key}")
        self._cells[key] = metric

    def __len__(self) -> int:
        return len(self._cells)

    def test_folds(self) -> list:
        return sorted({t for t, _, _ in self._cells}, key=lambda x: (x is None, x))

    def val_folds(self) -> list[int]:
        return sorted({m for _, _, m in self._cells})

    def config_indexes(self) -> list[int]:
        return sorted({j for _, j, _ in self._cells})

    def values_for(self, test_fold: int | None, config_index: int) -> list[float]:
        picked = [
            (m, v) for (t, j, m), v in self._cells.items() if t == test_fold and j == config_index
        ]
        return [v for _, v in sorted(picked)]

    def summaries(self, test_fold: int | None) -> list[ConfigSummary]:
        out = []
        for j in self.config_indexes():
            values = self.values_for(test_fold, j)
            if values:
                out.append(ConfigSummary(config_index=j, vbar=statistics.mean(values)))
        return out

    def check_complete(self, k: int, config_indexes, nested: bool) -> None:
        """Every (test fold, config, validation fold) cell must be present."""
        missing = []
        tests = range(k) if nested else [None]
        for t in tests:
            for j in config_indexes:
                for m in range(k):
                    if nested and m == t:
                        continue
                    if (t, j, m) not in self._cells:
                        missing.append((t, j, m))
        if missing:
            raise MatrixShapeError(missing)


def load_matrix_file(path: str | Path):
    """Parse fixture rows `test_fold(or -),config_index,val_fold(or -),metric`.

    Rows with a validation fold are matrix cells; rows without one are test
    metrics (one per test fold). Returns (matrix, test_rows) where test_rows
    maps test fold -> (config index, metric).
    """
    matrix = ValidationMatrix()
    test_rows: dict[int, tuple[int, float]] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line_no, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("test_fold"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise EngineError(f"row {line_no}: want test_fold,config_index,val_fold,metric")
        try:
            test = None if parts[0] == "-" else int(parts[0])
            config = int(parts[1])
            val = None if parts[2] == "-" else int(parts[2])
            metric = float(parts[3])
        except ValueError as exc:
            raise EngineError(f"row {line_no}: {exc}") from None
        if val is None:
            if test is None:
                raise EngineError(f"row {line_no}: needs a test fold or a validation fold")
            if test in test_rows:
                raise EngineError(f"row {line_no}: duplicate test row for fold {test}")
            test_rows[test] = (config, metric)
        else:
            try:
                matrix.add(test, config, val, metric)
            except EngineError as exc:
                raise EngineError(f"row {line_no}: {exc}") from None
    return matrix, test_rows


# -- reports --------------------------------------------------------------------


@dataclass(frozen=True)
class FoldOutcome:
    test_fold: int
    selected_config: int
    mean_validation: float | None
    test_metric: float
    config_means: tuple[tuple[int, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "test_fold": self.test_fold,
            "selected_config": self.selected_config,
            "mean_validation": self.mean_validation,
            "test_metric": self.test_metric,
            "config_means": [list(pair) for pair in self.config_means],
        }


@dataclass(frozen=True)
class RunMeta:
    run_id: str
    k: int
    n: int
    epochs: int | None
    level: str | None
    seeds: dict | None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "k": self.k,
            "n": self.n,
            "epochs": self.epochs,
            "level": self.level,
            "seeds": self.seeds,
        }


@dataclass(frozen=True)
class NachosReport:
    meta: RunMeta
    folds: tuple[FoldOutcome, ...]
    test_summary: SummaryStats
    task_counts: dict | None = None

    def to_dict(self) -> dict:
        out = {"format": REPORT_FORMAT, "algorithm": "nachos"}
        out.update(self.meta.to_dict())
        out["task_counts"] = self.task_counts or {
            "train_val": self.meta.k * (self.meta.k - 1) * self.meta.n,
            "train_test": self.meta.k,
        }
        out["folds"] = [fold.to_dict() for fold in self.folds]
        out["test_summary"] = self.test_summary.to_dict()
        return out


@dataclass(frozen=True)
class DachosReport:
    meta: RunMeta
    config_summaries: tuple[ConfigSummary, ...]
    selection: SelectionResult
    artifact: ModelArtifact | None
    training_metric: float | None
    task_counts: dict | None = None

    def to_dict(self) -> dict:
        out = {"format": REPORT_FORMAT, "algorithm": "dachos"}
        out.update(self.meta.to_dict())
        out["task_counts"] = self.task_counts or {
            "train_val": self.meta.k * self.meta.n,
            "final_train": 1,
        }
        out["config_summaries"] = [[s.config_index, s.vbar] for s in self.config_summaries]
        out["selection"] = {
            "selected_config": self.selection.jstar,
            "mean_validation": self.selection.vbar_star,
            "runner_up_gap": self.selection.runner_up_gap,
            "display": f"config {self.selection.jstar}: {self.selection.vbar_star:.2f}",
        }
        out["artifact"] = (
            None
            if self.artifact is None
            else {
                "ref": self.artifact.artifact_ref,
                "config_index": self.artifact.config.index,
                "trained_on": list(self.artifact.trained_on),
                "training_metric": self.training_metric,
            }
        )
        return out


def report_to_json(report) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def write_report(report, path: str | Path) -> None:
    Path(path).write_text(report_to_json(report), encoding="utf-8")


# -- planning --------------------------------------------------------------------


def plan_nachos(run_id: str, configs, k: int, epochs: int, seed: int = 0) -> TaskPlan:
    """Phase 1: every (test fold, config, validation fold) triple; phase 2:
    one test training per fold, configured at the barrier."""
    if k < 3:
        raise EngineError(f"nested runs need k >= 3, got {k}")
    if not configs:
        raise EngineError("no configurations to evaluate")
    folds = range(k)
    tasks = []
    for i in folds:
        for config in configs:
            for m in folds:
                if m == i:
                    continue
                train = tuple(f for f in folds if f not in (i, m))
                tasks.append(
                    TrainingTask(
                        run_id=run_id,
                        config=config,
                        mode=TRAIN_VAL,
                        train_folds=train,
                        epochs=epochs,
                        test_fold=i,
                        val_fold=m,
                        seed=seed,
                    )
                )
    return TaskPlan(
        run_id=run_id,
        phases=(
            PlannedPhase("train_val", tuple(tasks)),
            PlannedPhase("train_test", deferred_count=k),
        ),
    )


def plan_dachos(run_id: str, configs, k: int, epochs: int, seed: int = 0) -> TaskPlan:
    if k < 2:
        raise EngineError(f"deployment runs need k >= 2, got {k}")
    if not configs:
        raise EngineError("no configurations to evaluate")
    folds = range(k)
    tasks = []
    for config in configs:
        for m in folds:
            train = tuple(f for f in folds if f != m)
            tasks.append(
                TrainingTask(
                    run_id=run_id,
                    config=config,
                    mode=TRAIN_VAL,
                    train_folds=train,
                    epochs=epochs,
                    val_fold=m,
                    seed=seed,
                )
            )
    return TaskPlan(
        run_id=run_id,
        phases=(
            PlannedPhase("train_val", tuple(tasks)),
            PlannedPhase("final_train", deferred_count=1),
        ),
    )


def _matrix_from_results(plan_tasks, results) -> ValidationMatrix:
    matrix = ValidationMatrix()
    for task in plan_tasks:
        result = results.get(task.task_id)
        if result is None:
            raise EngineError(f"missing result for {task.task_id}")
        matrix.add(task.test_fold, task.config.index, task.val_fold, result.metric)
    return matrix


# -- live runs ---------------------------------------------------------------------


def make_backend(spec: JobSpec):
    kind = spec.backend["kind"]
    if kind == "mock":
        return MockBackend(delay_s=float(spec.backend.get("delay_s", 0.0)))
    if kind == "tiny":
        return TinyLearnerBackend()
    timeout = spec.backend.get("timeout_s")
    command = list(spec.backend["command"])
    return lambda: ExecBackend(command=command, timeout_s=timeout)


def resolve_configs(spec: JobSpec) -> list[HyperparameterConfig]:
    if "preset" in spec.space:
        if spec.space["preset"] != "default":
            raise UsageError(f"unknown space preset {spec.space['preset']!r}")
        return sample_configs(default_search_space(), spec.n, spec.seeds["sampling"])
    if "axes" in spec.space:
        space = SearchSpace.from_axes(spec.space["axes"])
        return sample_configs(space, spec.n, spec.seeds["sampling"])
    return load_configs(spec.space["configs"])


def _prepare_run(spec: JobSpec, store: CheckpointStore):
    manifest = load_manifest(spec.manifest)
    folds = assign_folds(
        manifest, spec.k, PartitionLevel(spec.level), spec.seeds["partition"]
    )
    configs = resolve_configs(spec)
    effective = replace(spec, n=len(configs))

    run_dir = store.root / "runs" / spec.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "jobspec.json").write_text(dumps_jobspec(effective), encoding="utf-8")
    write_manifest(manifest, run_dir / "manifest.csv")
    save_assignment(folds, run_dir / "folds.csv")
    save_configs(configs, run_dir / "configs.csv")
    data = DataContext(
        manifest=manifest,
        folds=folds,
        manifest_path=str(run_dir / "manifest.csv"),
        folds_path=str(run_dir / "folds.csv"),
    )
    return manifest, folds, configs, effective, run_dir, data


def run_job(spec: JobSpec, pool: WorkerPool | None = None, on_progress=None):
    """Execute the spec end to end; returns (report, report path)."""
    pool = pool if pool is not None else parse_pool(spec.pool)
    with CheckpointStore(spec.store) as store:
        manifest, folds, configs, effective, run_dir, data = _prepare_run(spec, store)
        seed = spec.seeds["trainer"]
        if spec.algorithm == "nachos":
            plan = plan_nachos(spec.run_id, configs, spec.k, spec.epochs, seed)
            report = _run_nachos(effective, plan, pool, store, data, configs, on_progress)
        else:
            plan = plan_dachos(spec.run_id, configs, spec.k, spec.epochs, seed)
            report = _run_dachos(effective, plan, pool, store, data, configs, on_progress)
        report_path = run_dir / "report.json"
        write_report(report, report_path)
        return report, report_path


def _meta(spec: JobSpec) -> RunMeta:
    return RunMeta(
        run_id=spec.run_id,
        k=spec.k,
        n=spec.n,
        epochs=spec.epochs,
        level=spec.level,
        seeds=dict(spec.seeds),
    )


def _run_nachos(spec, plan, pool, store, data, configs, on_progress) -> NachosReport:
    phase1 = plan.phases[0].tasks
    by_index = {config.index: config for config in configs}
    selections: dict[int, SelectionResult] = {}
    summaries_by_fold: dict[int, list[ConfigSummary]] = {}
    phase2_tasks: dict[int, TrainingTask] = {}
    folds = range(spec.k)

    def resolve(_phase_index, results):
        matrix = _matrix_from_results(phase1, results)
        matrix.check_complete(spec.k, sorted(by_index), nested=True)
        for i in folds:
            summaries = matrix.summaries(i)
            summaries_by_fold[i] = summaries
            selection = select_best(summaries)
            selections[i] = selection
            train = tuple(f for f in folds if f != i)
            phase2_tasks[i] = TrainingTask(
                run_id=spec.run_id,
                config=by_index[selection.jstar],
                mode=TRAIN_TEST,
                train_folds=train,
                epochs=spec.epochs,
                test_fold=i,
                seed=spec.seeds["trainer"],
            )
        return tuple(phase2_tasks[i] for i in folds)

    results = dispatch(
        plan,
        pool,
        store,
        make_backend(spec),
        data=data,
        resolve=resolve,
        retries=spec.retries,
        on_progress=on_progress,
    )

    outcomes = []
    tests = []
    for i in folds:
        selection = selections[i]
        metric = results[phase2_tasks[i].task_id].metric
        tests.append(metric)
        outcomes.append(
            FoldOutcome(
                test_fold=i,
                selected_config=selection.jstar,
                mean_validation=selection.vbar_star,
                test_metric=metric,
                config_means=tuple(
                    (s.config_index, s.vbar) for s in summaries_by_fold[i]
                ),
            )
        )
    return NachosReport(
        meta=_meta(spec), folds=tuple(outcomes), test_summary=summarize_tests(tests)
    )


def _run_dachos(spec, plan, pool, store, data, configs, on_progress) -> DachosReport:
    phase1 = plan.phases[0].tasks
    by_index = {config.index: config for config in configs}
    holder: dict[str, object] = {}
    all_folds = tuple(range(spec.k))

    def resolve(_phase_index, results):
        matrix = _matrix_from_results(phase1, results)
        matrix.check_complete(spec.k, sorted(by_index), nested=False)
        summaries = matrix.summaries(None)
        selection = select_best(summaries)
        holder["summaries"] = summaries
        holder["selection"] = selection
        task = TrainingTask(
            run_id=spec.run_id,
            config=by_index[selection.jstar],
            mode=FINAL_TRAIN,
            train_folds=all_folds,
            epochs=spec.epochs,
            seed=spec.seeds["trainer"],
        )
        holder["final_task"] = task
        return (task,)

    results = dispatch(
        plan,
        pool,
        store,
        make_backend(spec),
        data=data,
        resolve=resolve,
        retries=spec.retries,
        on_progress=on_progress,
    )

    selection: SelectionResult = holder["selection"]
    config = by_index[selection.jstar]
    final = results[holder["final_task"].task_id]
    artifact = ModelArtifact(
        artifact_ref=final.checkpoint_ref, config=config, trained_on=all_folds
    )
    return DachosReport(
        meta=_meta(spec),
        config_summaries=tuple(holder["summaries"]),
        selection=selection,
        artifact=artifact,
        training_metric=final.metric,
    )


# -- replay -----------------------------------------------------------------------


def replay_nachos(matrix: ValidationMatrix, test_rows: dict) -> NachosReport:
    """Selection and aggregation as if the matrix cells were live results."""
    if not test_rows:
        raise EngineError("replay needs test rows to summarize")
    k = len(test_rows)
    if sorted(test_rows) != list(range(k)):
        raise EngineError(f"test rows must cover folds 0..{k - 1}, got {sorted(test_rows)}")
    config_indexes = matrix.config_indexes()
    if config_indexes:
        matrix.check_complete(k, config_indexes, nested=True)
    outcomes = []
    tests = []
    for i in sorted(test_rows):
        given_config, metric = test_rows[i]
        tests.append(metric)
        if config_indexes:
            summaries = matrix.summaries(i)
            selection = select_best(summaries)
            if selection.jstar != given_config:
                raise EngineError(
                    f"test row for fold {i} names config {given_config} but the "
                    f"matrix selects {selection.jstar}"
                )
            outcomes.append(
                FoldOutcome(
                    test_fold=i,
                    selected_config=selection.jstar,
                    mean_validation=selection.vbar_star,
                    test_metric=metric,
                    config_means=tuple((s.config_index, s.vbar) for s in summaries),
                )
            )
        else:
            outcomes.append(
                FoldOutcome(
                    test_fold=i,
                    selected_config=given_config,
                    mean_validation=None,
                    test_metric=metric,
                )
            )
    seen = config_indexes or sorted({c for c, _ in test_rows.values()})
    meta = RunMeta(run_id="replay", k=k, n=len(seen), epochs=None, level=None, seeds=None)
    return NachosReport(
        meta=meta,
        folds=tuple(outcomes),
        test_summary=summarize_tests(tests),
        task_counts={"train_val": len(matrix), "train_test": len(test_rows)},
    )


def replay_dachos(matrix: ValidationMatrix) -> DachosReport:
    if len(matrix) == 0:
        raise EngineError("replay needs matrix cells")
    if matrix.test_folds() != [None]:
        raise EngineError("deployment replay rows must use '-' for the test fold")
    k = len(matrix.val_folds())
    config_indexes = matrix.config_indexes()
    matrix.check_complete(k, config_indexes, nested=False)
    summaries = matrix.summaries(None)
    selection = select_best(summaries)
    meta = RunMeta(
        run_id="replay", k=k, n=len(config_indexes), epochs=None, level=None, seeds=None
    )
    return DachosReport(
        meta=meta,
        config_summaries=tuple(summaries),
        selection=selection,
        artifact=None,
        training_metric=None,
        task_counts={"train_val": len(matrix), "final_train": 0},
    )


# -- reconstruction from the metadata log -----------------------------------------


class RunIncomplete(EngineError):
    def __init__(self, progress):
        phases = "; ".join(
            f"{name}: {done}/{total}" for name, done, total in progress
        )
        super().__init__(f"run incomplete ({phases})")
        self.progress = progress


def load_run_spec(store: CheckpointStore, run_id: str) -> JobSpec:
    snapshot = store.root / "runs" / run_id / "jobspec.json"
    if not snapshot.exists():
        raise EngineError(f"unknown run {run_id!r}: no spec snapshot in the store")
    return loads_jobspec(snapshot.read_text(encoding="utf-8"))


def reconstruct_report(store: CheckpointStore, run_id: str):
    """Rebuild the exact report from the metadata log alone."""
    spec = load_run_spec(store, run_id)
    records = [r for r in store.read_records(run_id) if r.status == "completed"]
    matrix = ValidationMatrix()
    tests: dict[int, tuple[int, float]] = {}
    final: tuple[int, float] | None = None
    for record in records:
        if record.val_fold is not None:
            matrix.add(record.test_fold, record.config_index, record.val_fold, record.metric)
        elif record.test_fold is not None:
            tests[record.test_fold] = (record.config_index, record.metric)
        else:
            final = (record.config_index, record.metric)

    progress = _progress_from(spec, matrix, tests, final)
    if any(done < total for _, done, total in progress):
        raise RunIncomplete(progress)

    if spec.algorithm == "nachos":
        config_indexes = matrix.config_indexes()
        matrix.check_complete(spec.k, config_indexes, nested=True)
        outcomes = []
        values = []
        for i in range(spec.k):
            summaries = matrix.summaries(i)
            selection = select_best(summaries)
            config, metric = tests[i]
            if config != selection.jstar:
                raise EngineError(
                    f"log names config {config} for test fold {i} but the matrix "
                    f"selects {selection.jstar}"
                )
            values.append(metric)
            outcomes.append(
                FoldOutcome(
                    test_fold=i,
                    selected_config=selection.jstar,
                    mean_validation=selection.vbar_star,
                    test_metric=metric,
                    config_means=tuple((s.config_index, s.vbar) for s in summaries),
                )
            )
        return NachosReport(
            meta=_meta(spec), folds=tuple(outcomes), test_summary=summarize_tests(values)
        )

    config_indexes = matrix.config_indexes()
    matrix.check_complete(spec.k, config_indexes, nested=False)
    summaries = matrix.summaries(None)
    selection = select_best(summaries)
    run_dir = store.root / "runs" / run_id
    configs = load_configs(run_dir / "configs.csv")
    by_index = {config.index: config for config in configs}
    config = by_index[selection.jstar]
    task_id = f"run/{run_id}/cfg{config.index}/test-/val-"
    artifact = ModelArtifact(
        artifact_ref=store.checkpoint_ref(task_id, spec.epochs),
        config=config,
        trained_on=tuple(range(spec.k)),
    )
    return DachosReport(
        meta=_meta(spec),
        config_summaries=tuple(summaries),
        selection=selection,
        artifact=artifact,
        training_metric=final[1],
    )


def _progress_from(spec: JobSpec, matrix, tests, final):
    if spec.algorithm == "nachos":
        return [
            ("train_val", len(matrix), spec.k * (spec.k - 1) * spec.n),
            ("train_test", len(tests), spec.k),
        ]
    return [
        ("train_val", len(matrix), spec.k * spec.n),
        ("final_train", 1 if final is not None else 0, 1),
    ]


def run_progress(store: CheckpointStore, run_id: str):
    """Per-phase (name, done, total) triples for an in-progress run."""
    spec = load_run_spec(store, run_id)
    matrix = ValidationMatrix()
    tests: dict[int, tuple[int, float]] = {}
    final = None
    for record in store.read_records(run_id):
        if record.status != "completed":
            continue
        if record.val_fold is not None:
            matrix.add(record.test_fold, record.config_index, record.val_fold, record.metric)
        elif record.test_fold is not None:
            tests[record.test_fold] = (record.config_index, record.metric)
        else:
            final = (record.config_index, record.metric)
    return _progress_from(spec, matrix, tests, final)

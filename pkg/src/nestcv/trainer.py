"""The unit of training work and the trainer backend contract.

A TrainingTask names everything a trainer needs: which configuration, which
folds to train on, which fold to evaluate, how many epochs, and where to
resume. Backends are deterministic functions of (seed, task, data): the mock
backend hashes the task identity into a metric, the tiny learner trains a
small network on real features, and the exec host delegates to an external
process over a wire protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol

from .checkpoint import CheckpointStore
from .hpspace import HyperparameterConfig
from .manifest import Manifest
from .partition import FoldAssignment
from .rng import fnv1a64

TRAIN_VAL = "train_val"
TRAIN_TEST = "train_test"
FINAL_TRAIN = "final_train"
MODES = (TRAIN_VAL, TRAIN_TEST, FINAL_TRAIN)

ProgressFn = Callable[[int, float], None]


class TaskError(Exception):
    """A task violates its own invariants; never retried."""


class TrainerFailure(Exception):
    """The trainer itself failed; surfaced to the scheduler as retryable."""

    def __init__(self, message: str, last_epoch: int = 0):
        super().__init__(message)
        self.last_epoch = last_epoch


class ProtocolViolation(TrainerFailure):
    """An external trainer broke the wire contract."""


class MissingResumeCheckpoint(TrainerFailure):
    """resume_from_epoch points at a model blob that does not exist."""


@dataclass(frozen=True)
class TrainingTask:
    """One training job: mode decides which fold is evaluated.

    train_val evaluates val_fold, train_test evaluates test_fold, and
    final_train trains on everything and evaluates nothing held out. The
    test_fold is carried even on train_val tasks (when nested) because it is
    excluded from training and names the outer iteration.
    """

    run_id: str
    config: HyperparameterConfig
    mode: str
    train_folds: tuple[int, ...]
    epochs: int
    test_fold: int | None = None
    val_fold: int | None = None
    resume_from_epoch: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise TaskError(f"unknown mode {self.mode!r}")
        if self.epochs < 1:
            raise TaskError(f"epochs must be >= 1, got {self.epochs}")
        if not self.train_folds:
            raise TaskError("train_folds must be non-empty")
        if list(self.train_folds) != sorted(set(self.train_folds)):
            raise TaskError("train_folds must be ascending and duplicate-free")
        if not 0 <= self.resume_from_epoch <= self.epochs:
            raise TaskError(
                f"resume_from_epoch {self.resume_from_epoch} outside [0, {self.epochs}]"
            )
        if self.mode == TRAIN_VAL and self.val_fold is None:
            raise TaskError("train_val task needs a val_fold")
        if self.mode == TRAIN_TEST:
            if self.test_fold is None:
                raise TaskError("train_test task needs a test_fold")
            if self.val_fold is not None:
                raise TaskError("train_test task must not carry a val_fold")
        if self.mode == FINAL_TRAIN and (self.test_fold is not None or self.val_fold is not None):
            raise TaskError("final_train task holds out no folds")
        for held_out in (self.test_fold, self.val_fold):
            if held_out is not None and held_out in self.train_folds:
                raise TaskError(f"held-out fold {held_out} appears in train_folds")

    @property
    def eval_fold(self) -> int | None:
        if self.mode == TRAIN_VAL:
            return self.val_fold
        if self.mode == TRAIN_TEST:
            return self.test_fold
        return None

    @property
    def task_id(self) -> str:
        test = self.test_fold if self.test_fold is not None else "-"
        val = self.val_fold if self.val_fold is not None else "-"
        return f"run/{self.run_id}/cfg{self.config.index}/test{test}/val{val}"

    def with_resume(self, epoch: int) -> "TrainingTask":
        return replace(self, resume_from_epoch=epoch)


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    metric: float
    epochs_completed: int
    checkpoint_ref: str

    def __post_init__(self):
        if not 0.0 <= self.metric <= 1.0:
            raise TaskError(f"metric {self.metric} outside [0, 1]")


@dataclass(frozen=True)
class ModelArtifact:
    """A deployable trained model: where its blob lives and how it was made."""

    artifact_ref: str
    config: HyperparameterConfig
    trained_on: tuple[int, ...]


@dataclass
class DataContext:
    """Everything a backend may need about the data.

    The mock backend ignores all of it; the tiny learner uses the in-memory
    manifest and folds; the exec host hands the file paths to the external
    process.
    """

    manifest: Optional[Manifest] = None
    folds: Optional[FoldAssignment] = None
    manifest_path: Optional[str] = None
    folds_path: Optional[str] = None


class Backend(Protocol):
    def run_task(
        self,
        task: TrainingTask,
        data: DataContext,
        store: CheckpointStore,
        progress: ProgressFn | None = None,
    ) -> TaskResult: ...


def mock_canonical(seed: int, task: TrainingTask) -> str:
    eval_part = task.eval_fold if task.eval_fold is not None else "-"
    train_part = ",".join(str(f) for f in task.train_folds)
    return f"{seed}|{task.config.index}|{task.mode}|{eval_part}|{train_part}|{task.epochs}"


def mock_metric(seed: int, task: TrainingTask) -> float:
    """Deterministic stand-in metric: a hash of the task identity in [0, 1).

    Depends only on (seed, config index, mode, eval fold, train folds,
    epochs), so resume-equivalence is exact by construction.
    """
    return fnv1a64(mock_canonical(seed, task)) / 2.0**64


def check_resume_blob(task: TrainingTask, store: CheckpointStore) -> None:
    if task.resume_from_epoch > 0:
        if store.latest_model_epoch(task.task_id) is None or not store.model_path(
            task.task_id, task.resume_from_epoch
        ).exists():
            raise MissingResumeCheckpoint(
                f"{task.task_id}: no blob at epoch {task.resume_from_epoch}"
            )


@dataclass
class MockBackend:
    """Hash-based trainer: instant, deterministic, checkpoint-faithful.

    delay_s, when nonzero, spreads a synthetic sleep across the task's
    epochs so scheduling behavior can be measured.
    """

    delay_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def run_task(
        self,
        task: TrainingTask,
        data: DataContext,
        store: CheckpointStore,
        progress: ProgressFn | None = None,
    ) -> TaskResult:
        check_resume_blob(task, store)
        metric = mock_metric(task.seed, task)
        ref = store.checkpoint_ref(task.task_id, task.epochs)
        if task.resume_from_epoch >= task.epochs:
            return TaskResult(task.task_id, metric, task.epochs, ref)
        per_epoch = self.delay_s / task.epochs if self.delay_s else 0.0
        for epoch in range(task.resume_from_epoch + 1, task.epochs + 1):
            if per_epoch:
                time.sleep(per_epoch)
            blob = f"mock|{task.task_id}|{epoch}\n".encode("utf-8")
            ref = store.save_model(task.task_id, epoch, blob)
            if progress is not None:
                progress(epoch, metric)
        return TaskResult(task.task_id, metric, task.epochs, ref)

"""Two-tier run persistence: an append-only metadata log plus model blobs.

Tier 1 is a JSONL log of task lifecycle records. The log is only ever
appended to and each line is flushed as it is written, so after a crash the
worst case is a single torn final line, which recovery tolerates and a later
append truncates away. Tier 2 stores per-epoch model payloads at
models/{task_id}/{epoch}.ckpt. A new epoch blob is fully written before the
previous one is deleted, so at least one resumable blob survives any kill
point past the first persisted epoch.

Log format (stable, for external tooling): one JSON object per line, UTF-8,
fields: run_id, task_id, status in {started, epoch, completed, failed},
config_index, test_fold (null when absent), val_fold (null when absent),
epoch, metric (null until known), wall_time (unix seconds), detail (optional
failure message).
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)


class StoreError(Exception):
    pass


class CorruptLogError(StoreError):
    """The metadata log is damaged beyond a torn final line."""


STATUSES = ("started", "epoch", "completed", "failed")


@dataclass(frozen=True)
class MetadataRecord:
    """One lifecycle event for a task.

    status 'started' marks dispatch, 'epoch' marks a persisted model blob,
    'completed' carries the final metric, 'failed' carries an error message
    in detail.
    """

    run_id: str
    task_id: str
    status: str
    config_index: int
    test_fold: int | None = None
    val_fold: int | None = None
    epoch: int = 0
    metric: float | None = None
    wall_time: float = 0.0
    detail: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "task_id": self.task_id,
            "status": self.status,
            "config_index": self.config_index,
            "test_fold": self.test_fold,
            "val_fold": self.val_fold,
            "epoch": self.epoch,
            "metric": self.metric,
            "wall_time": self.wall_time,
        }
        if self.detail is not None:
            payload["detail"] = self.detail
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetadataRecord":
        payload = json.loads(line)
        if not isinstance(payload, dict):
            raise ValueError("record is not an object")
        try:
            record = cls(
                run_id=payload["run_id"],
                task_id=payload["task_id"],
                status=payload["status"],
                config_index=payload["config_index"],
                test_fold=payload.get("test_fold"),
                val_fold=payload.get("val_fold"),
                epoch=payload.get("epoch", 0),
                metric=payload.get("metric"),
                wall_time=payload.get("wall_time", 0.0),
                detail=payload.get("detail"),
            )
        except KeyError as missing:
            raise ValueError(f"record missing field {missing}") from None
        if not isinstance(record.task_id, str) or not record.task_id:
            raise ValueError("task_id must be a non-empty string")
        if not isinstance(record.config_index, int):
            raise ValueError("config_index must be an integer")
        if not isinstance(record.epoch, int):
            raise ValueError("epoch must be an integer")
        if record.metric is not None and not isinstance(record.metric, (int, float)):
            raise ValueError("metric must be a number")
        return record


def now() -> float:
    return time.time()


@dataclass(frozen=True)
class RecoveryView:
    """What a resuming run can trust about prior progress.

    completed maps task_id to its final metric. partial maps task_id to
    (highest epoch with a surviving model blob, checkpoint ref); tasks whose
    epoch records all point at since-deleted blobs are omitted. failed keeps
    the last failure message for tasks that never completed.
    """

    completed: dict[str, float]
    partial: dict[str, tuple[int, str]]
    failed: dict[str, str]

    def is_completed(self, task_id: str) -> bool:
        return task_id in self.completed


class CheckpointStore:
    """Filesystem-backed store rooted at a single directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._log_path = self.root / "metadata.jsonl"
        self._models_root = self.root / "models"
        self._log_file = None

    @property
    def log_path(self) -> Path:
        return self._log_path

    @property
    def models_root(self) -> Path:
        return self._models_root

    # -- tier 1: metadata log ------------------------------------------------

    def append(self, record: MetadataRecord) -> None:
        """Append one record and flush it before returning."""
        if self._log_file is None:
            self._repair_torn_tail()
            self._log_file = open(self._log_path, "a", encoding="utf-8")
        self._log_file.write(record.to_json() + "\n")
        self._log_file.flush()

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def __enter__(self) -> "CheckpointStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _repair_torn_tail(self) -> None:
        # drop a torn final line before appending resumes
        if not self._log_path.exists():
            return
        data = self._log_path.read_bytes()
        if not data or data.endswith(b"\n"):
            return
        cut = data.rfind(b"\n")
        keep = data[: cut + 1] if cut >= 0 else b""
        log.warning("metadata log had a torn final line; truncating it")
        with open(self._log_path, "wb") as fh:
            fh.write(keep)
            fh.flush()

    def read_records(self, run_id: str | None = None) -> list[MetadataRecord]:
        """Parse the full log, tolerating only a torn final line.

        A line that fails to parse anywhere else means real corruption and
        raises CorruptLogError, as does a second 'completed' record for the
        same task within one run.
        """
        if not self._log_path.exists():
            return []
        raw_lines = self._log_path.read_text(encoding="utf-8").split("\n")
        if raw_lines and raw_lines[-1] == "":
            raw_lines.pop()
        records: list[MetadataRecord] = []
        completed_seen: set[tuple[str, str]] = set()
        last = len(raw_lines) - 1
        for pos, line in enumerate(raw_lines):
            try:
                record = MetadataRecord.from_json(line)
            except (ValueError, json.JSONDecodeError):
                if pos == last:
                    log.warning("dropping torn final line of metadata log")
                    break
                raise CorruptLogError(f"unparseable record at line {pos + 1}") from None
            if record.status == "completed":
                key = (record.run_id, record.task_id)
                if key in completed_seen:
                    raise CorruptLogError(
                        f"duplicate completion for task {record.task_id!r} at line {pos + 1}"
                    )
                completed_seen.add(key)
            if run_id is None or record.run_id == run_id:
                records.append(record)
        return records

    def recovery_view(self, run_id: str | None = None) -> RecoveryView:
        completed: dict[str, float] = {}
        failed: dict[str, str] = {}
        saw_epochs: set[str] = set()
        for record in self.read_records(run_id):
            if record.status == "epoch":
                saw_epochs.add(record.task_id)
            elif record.status == "completed":
                completed[record.task_id] = record.metric if record.metric is not None else 0.0
                failed.pop(record.task_id, None)
            elif record.status == "failed":
                if record.task_id not in completed:
                    failed[record.task_id] = record.detail or ""
        partial: dict[str, tuple[int, str]] = {}
        for task_id in saw_epochs:
            if task_id in completed:
                continue
            epoch = self.latest_model_epoch(task_id)
            if epoch is not None:
                partial[task_id] = (epoch, self.checkpoint_ref(task_id, epoch))
        return RecoveryView(completed=completed, partial=partial, failed=failed)

    # -- tier 2: model blobs -------------------------------------------------

    def checkpoint_ref(self, task_id: str, epoch: int) -> str:
        """Opaque ref: the blob path relative to the blob area."""
        return f"{task_id}/{epoch}.ckpt"

    def model_path(self, task_id: str, epoch: int) -> Path:
        # task ids contain '/', kept as directories so blobs mirror the task tree
        return self._models_root / task_id / f"{epoch}.ckpt"

    def save_model(self, task_id: str, epoch: int, blob: bytes) -> str:
        """Write the epoch blob, then delete older epochs for the task.

        Write-then-delete ordering means a crash between the two steps leaves
        extra blobs, never zero; resume picks the highest epoch. Returns the
        checkpoint ref.
        """
        if not blob:
            raise StoreError("refusing to save an empty model blob")
        path = self.model_path(task_id, epoch)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".ckpt.tmp")
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
        os.replace(tmp, path)
        for stale in path.parent.glob("*.ckpt"):
            if stale == path:
                continue
            try:
                if int(stale.stem) < epoch:
                    stale.unlink()
            except ValueError:
                continue
        return self.checkpoint_ref(task_id, epoch)

    def load_model(self, task_id: str, epoch: int) -> bytes:
        path = self.model_path(task_id, epoch)
        if not path.exists():
            raise StoreError(f"no model blob for {task_id!r} epoch {epoch}")
        return path.read_bytes()

    def load_ref(self, checkpoint_ref: str) -> bytes:
        path = self._models_root / checkpoint_ref
        if not path.exists():
            raise StoreError(f"unresolvable checkpoint ref {checkpoint_ref!r}")
        return path.read_bytes()

    def latest_model_epoch(self, task_id: str) -> int | None:
        """Highest epoch with a surviving blob, or None."""
        task_dir = self._models_root / task_id
        if not task_dir.is_dir():
            return None
        epochs = []
        for blob in task_dir.glob("*.ckpt"):
            try:
                epochs.append(int(blob.stem))
            except ValueError:
                continue
        return max(epochs) if epochs else None

    def delete_models(self, task_id: str) -> None:
        task_dir = self._models_root / task_id
        if not task_dir.is_dir():
            return
        for blob in task_dir.glob("*.ckpt"):
            blob.unlink()

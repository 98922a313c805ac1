"""Host for external trainer processes.

The host spawns the trainer command once and reuses the process for
successive tasks (one trainer process per worker slot). Conversation per
task: the host writes one task message, then consumes progress messages
until a terminal done or error arrives. Progress epochs are mirrored into
the checkpoint store as small pointer blobs so the engine's recovery view
treats external tasks exactly like built-in ones; the trainer keeps its own
resumable state file at the path the host hands it.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field

from .checkpoint import CheckpointStore
from .trainer import (
    DataContext,
    ProgressFn,
    ProtocolViolation,
    TaskResult,
    TrainerFailure,
    TrainingTask,
    check_resume_blob,
)
from .wire import task_to_wire, write_message


def _pump(stream, out: "queue.Queue[str | None]") -> None:
    for line in stream:
        out.put(line)
    out.put(None)


@dataclass
class ExecBackend:
    """Run tasks through an external process speaking the trainer protocol."""

    command: list[str]
    timeout_s: float | None = None
    _proc: subprocess.Popen | None = field(default=None, repr=False)
    _lines: "queue.Queue[str | None]" = field(default_factory=queue.Queue, repr=False)

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is not None and self._proc.poll() is None:
            return self._proc
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._lines = queue.Queue()
        threading.Thread(
            target=_pump, args=(self._proc.stdout, self._lines), daemon=True
        ).start()
        return self._proc

    def close(self) -> None:
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        if proc.poll() is None:
            try:
                write_message(proc.stdin, {"type": "cancel"})
            except (BrokenPipeError, OSError, ValueError):
                pass
            proc.stdin.close()
            try:
                proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def _next_message(self, deadline: float | None, last_epoch: int) -> dict:
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                self.close()
                raise TrainerFailure(
                    f"trainer timed out after {self.timeout_s}s", last_epoch=last_epoch
                ) from None
            if line is None:
                code = self._proc.poll() if self._proc else None
                self._proc = None
                raise TrainerFailure(
                    f"trainer exited (code {code}) before finishing", last_epoch=last_epoch
                )
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except ValueError:
                raise ProtocolViolation(f"undecodable trainer output: {line[:200]!r}")
            if not isinstance(payload, dict):
                raise ProtocolViolation(f"trainer message is not an object: {line[:200]!r}")
            return payload

    def run_task(
        self,
        task: TrainingTask,
        data: DataContext,
        store: CheckpointStore,
        progress: ProgressFn | None = None,
    ) -> TaskResult:
        check_resume_blob(task, store)
        proc = self._ensure_process()
        state_path = store.models_root / task.task_id / "trainer_state.bin"
        state_path.parent.mkdir(parents=True, exist_ok=True)
        message = task_to_wire(task)
        message["type"] = "task"
        message["data_path"] = data.manifest_path
        message["folds_path"] = data.folds_path
        message["checkpoint_path"] = str(state_path)
        try:
            write_message(proc.stdin, message)
        except (BrokenPipeError, OSError, ValueError):
            self._proc = None
            raise TrainerFailure("trainer pipe closed before task could be sent")

        deadline = None if self.timeout_s is None else time.monotonic() + self.timeout_s
        last_epoch = task.resume_from_epoch
        ref = store.checkpoint_ref(task.task_id, last_epoch)
        while True:
            payload = self._next_message(deadline, last_epoch)
            kind = payload.get("type")
            if kind == "progress":
                epoch, metric = self._check_progress(payload, task, last_epoch)
                last_epoch = epoch
                pointer = f"external|{task.task_id}|{epoch}|{state_path}\n".encode("utf-8")
                ref = store.save_model(task.task_id, epoch, pointer)
                if progress is not None:
                    progress(epoch, metric)
            elif kind == "done":
                metric = self._check_done(payload, task)
                return TaskResult(
                    task_id=task.task_id,
                    metric=metric,
                    epochs_completed=task.epochs,
                    checkpoint_ref=str(payload.get("checkpoint_ref") or ref),
                )
            elif kind == "error":
                raise TrainerFailure(
                    f"trainer error: {payload.get('message', '?')}", last_epoch=last_epoch
                )
            else:
                raise ProtocolViolation(f"unexpected trainer message type {kind!r}")

    @staticmethod
    def _check_progress(payload: dict, task: TrainingTask, last_epoch: int):
        if payload.get("task_id") != task.task_id:
            raise ProtocolViolation(f"progress for wrong task {payload.get('task_id')!r}")
        epoch = payload.get("epoch")
        metric = payload.get("metric")
        if not isinstance(epoch, int) or epoch <= last_epoch or epoch > task.epochs:
            raise ProtocolViolation(f"progress epoch {epoch!r} out of order")
        if not isinstance(metric, (int, float)) or not 0.0 <= metric <= 1.0:
            raise ProtocolViolation(f"progress metric {metric!r} out of range")
        return epoch, float(metric)

    @staticmethod
    def _check_done(payload: dict, task: TrainingTask) -> float:
        if payload.get("task_id") != task.task_id:
            raise ProtocolViolation(f"done for wrong task {payload.get('task_id')!r}")
        metric = payload.get("metric")
        if not isinstance(metric, (int, float)) or not 0.0 <= metric <= 1.0:
            raise ProtocolViolation(f"final metric {metric!r} out of range")
        return float(metric)

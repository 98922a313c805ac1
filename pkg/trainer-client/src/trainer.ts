/**
 * Task execution: the mock trainer plus fault-injection hooks.
 *
 * Mock mode reproduces the manager's built-in metric exactly: hash the
 * canonical task string, scale to [0, 1). The metric ignores the resume
 * epoch by construction, so interrupted and uninterrupted runs agree.
 */

import { setTimeout as sleep } from "node:timers/promises";

import { canResume, readState, writeState } from "./checkpoint.js";
import { fnv1a64, hashToUnit } from "./fnv.js";
import { Emit, TaskMessage, taskIdOf } from "./protocol.js";

export function canonicalTask(task: TaskMessage): string {
  let evalFold: number | null;
  if (task.mode === "train_val") {
    evalFold = task.val_fold;
  } else if (task.mode === "train_test") {
    evalFold = task.test_fold;
  } else {
    evalFold = null;
  }
  const evalPart = evalFold === null || evalFold === undefined ? "-" : String(evalFold);
  const trainPart = task.train_folds.join(",");
  return `${task.seed}|${task.config.index}|${task.mode}|${evalPart}|${trainPart}|${task.epochs}`;
}

export function mockMetric(task: TaskMessage): number {
  return hashToUnit(fnv1a64(canonicalTask(task)));
}

export interface FaultOptions {
  sleepS?: number;
  dieAtEpoch?: number;
  errorAtEpoch?: number;
  badMetric?: boolean;
  repeatEpoch?: boolean;
  wrongTask?: boolean;
  garbage?: boolean;
}

export interface TaskIO {
  emit: Emit;
  writeRaw: (text: string) => void;
  exit: (code: number) => never;
}

export async function runTask(
  task: TaskMessage,
  faults: FaultOptions,
  io: TaskIO,
): Promise<void> {
  const taskId = taskIdOf(task);
  const metric = mockMetric(task);
  const resume = task.resume_from_epoch ?? 0;
  const statePath = task.checkpoint_path ?? null;

  if (resume > 0) {
    const state = statePath ? readState(statePath) : null;
    if (!canResume(state, taskId, resume)) {
      io.emit({ type: "error", task_id: taskId, message: "no resumable state" });
      return;
    }
  }

  for (let epoch = resume + 1; epoch <= task.epochs; epoch++) {
    if (faults.sleepS) {
      await sleep(faults.sleepS * 1000);
    }
    if (faults.dieAtEpoch === epoch) {
      io.exit(17);
    }
    if (faults.errorAtEpoch === epoch) {
      io.emit({ type: "error", task_id: taskId, message: "synthetic trainer error" });
      return;
    }
    if (faults.garbage) {
      io.writeRaw("this is not json\n");
      return;
    }
    // persist first, then report: once the manager records the epoch it
    // must be resumable
    if (statePath) {
      writeState(statePath, { task_id: taskId, epoch });
    }
    const reported = faults.badMetric ? 7.5 : metric;
    const reportedId = faults.wrongTask ? taskId + "-wrong" : taskId;
    io.emit({ type: "progress", task_id: reportedId, epoch, metric: reported });
    if (faults.repeatEpoch) {
      io.emit({ type: "progress", task_id: taskId, epoch, metric: reported });
    }
  }

  io.emit({ type: "done", task_id: taskId, metric, epochs_completed: task.epochs });
}

/**
 * Resumable trainer state, one small JSON file per task.
 *
 * The manager hands us the path and owns the directory; we own the
 * contents. Writes go through a temp file and rename so a kill can never
 * leave a half-written state behind, and the file is always persisted
 * before the epoch is reported: once the manager has seen epoch e, a
 * resume from e must succeed.
 */

import { readFileSync, renameSync, writeFileSync } from "node:fs";

export interface TrainerState {
  task_id: string;
  epoch: number;
}

export function readState(path: string): TrainerState | null {
  let parsed: unknown;
  try {
    parsed = JSON.parse(readFileSync(path, "utf-8"));
  } catch {
    return null;
  }
  if (typeof parsed !== "object" || parsed === null) {
    return null;
  }
  const state = parsed as Record<string, unknown>;
  if (typeof state.task_id !== "string" || typeof state.epoch !== "number") {
    return null;
  }
  return { task_id: state.task_id, epoch: state.epoch };
}

export function writeState(path: string, state: TrainerState): void {
  const tmp = path + ".tmp";
  writeFileSync(tmp, JSON.stringify(state));
  renameSync(tmp, path);
}

export function canResume(state: TrainerState | null, taskId: string, fromEpoch: number): boolean {
  return state !== null && state.task_id === taskId && state.epoch >= fromEpoch;
}

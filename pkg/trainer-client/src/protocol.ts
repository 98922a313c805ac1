/**
 * Message shapes for the stdio trainer protocol.
 *
 * The manager writes one JSON object per line on our stdin (task or
 * cancel); we answer on stdout with progress lines per epoch, then one
 * done or error. Unknown inbound types get an error reply.
 */

export type Mode = "train_val" | "train_test" | "final_train";

export interface WireConfig {
  index: number;
  values: [string, string][];
}

export interface TaskMessage {
  type: "task";
  run_id: string;
  mode: Mode;
  config: WireConfig;
  train_folds: number[];
  epochs: number;
  test_fold: number | null;
  val_fold: number | null;
  resume_from_epoch: number;
  seed: number;
  data_path?: string | null;
  folds_path?: string | null;
  checkpoint_path?: string | null;
}

export interface CancelMessage {
  type: "cancel";
}

export type InboundMessage = TaskMessage | CancelMessage;

export interface ProgressMessage {
  type: "progress";
  task_id: string;
  epoch: number;
  metric: number;
}

export interface DoneMessage {
  type: "done";
  task_id: string;
  metric: number;
  epochs_completed: number;
}

export interface ErrorMessage {
  type: "error";
  task_id?: string;
  message: string;
}

export type OutboundMessage = ProgressMessage | DoneMessage | ErrorMessage;

export type Emit = (message: OutboundMessage) => void;

export function emitToStdout(message: OutboundMessage): void {
  process.stdout.write(JSON.stringify(message) + "\n");
}

export function taskIdOf(task: TaskMessage): string {
  const test = task.test_fold === null || task.test_fold === undefined ? "-" : task.test_fold;
  const val = task.val_fold === null || task.val_fold === undefined ? "-" : task.val_fold;
  return `run/${task.run_id}/cfg${task.config.index}/test${test}/val${val}`;
}

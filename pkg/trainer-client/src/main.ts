#!/usr/bin/env node
/**
 * External trainer entry point.
 *
 * Reads one JSON message per stdin line (task or cancel), answers with
 * progress/done/error lines on stdout. Fault-injection flags exist for
 * the manager's failure-path tests; production use is plain
 * `node dist/main.js --mode mock`.
 */

import { createInterface } from "node:readline";
import { parseArgs } from "node:util";

import { emitToStdout, InboundMessage } from "./protocol.js";
import { FaultOptions, runTask } from "./trainer.js";

function parseFaults(argv: string[]): FaultOptions {
  const { values } = parseArgs({
    args: argv,
    options: {
      mode: { type: "string", default: "mock" },
      sleep: { type: "string", default: "0" },
      "die-at-epoch": { type: "string" },
      "error-at-epoch": { type: "string" },
      "bad-metric": { type: "boolean", default: false },
      "repeat-epoch": { type: "boolean", default: false },
      "wrong-task": { type: "boolean", default: false },
      garbage: { type: "boolean", default: false },
    },
  });
  if (values.mode !== "mock") {
    throw new Error(`unsupported mode ${JSON.stringify(values.mode)}`);
  }
  return {
    sleepS: Number(values.sleep),
    dieAtEpoch: values["die-at-epoch"] === undefined ? undefined : Number(values["die-at-epoch"]),
    errorAtEpoch:
      values["error-at-epoch"] === undefined ? undefined : Number(values["error-at-epoch"]),
    badMetric: values["bad-metric"],
    repeatEpoch: values["repeat-epoch"],
    wrongTask: values["wrong-task"],
    garbage: values.garbage,
  };
}

async function main(): Promise<void> {
  const faults = parseFaults(process.argv.slice(2));
  const io = {
    emit: emitToStdout,
    writeRaw: (text: string) => void process.stdout.write(text),
    exit: (code: number) => process.exit(code),
  };
  const lines = createInterface({ input: process.stdin, crlfDelay: Infinity });
  try {
    for await (const raw of lines) {
      const line = raw.trim();
      if (!line) {
        continue;
      }
      const message = JSON.parse(line) as InboundMessage;
      if (message.type === "cancel") {
        return;
      }
      if (message.type === "task") {
        await runTask(message, faults, io);
      } else {
        emitToStdout({
          type: "error",
          message: `unknown message type ${JSON.stringify((message as { type?: unknown }).type)}`,
        });
      }
    }
  } finally {
    // without this, stdin keeps the event loop alive after a cancel
    lines.close();
    process.stdin.destroy();
  }
}

main().catch((error) => {
  process.stderr.write(`${error}\n`);
  process.exit(1);
});

"""Message encoding for the two wire protocols.

External trainers speak newline-delimited JSON objects over their standard
streams. Remote workers speak length-delimited JSON over a stream socket:
each message is a 4-byte big-endian length followed by that many bytes of
UTF-8 JSON. Both protocols share one task encoding.
"""

from __future__ import annotations

import json
import socket
import struct
from typing import IO, Optional

from .hpspace import HyperparameterConfig
from .trainer import TrainingTask


class WireError(Exception):
    pass


# -- shared task encoding ------------------------------------------------


def task_to_wire(task: TrainingTask) -> dict:
    return {
        "run_id": task.run_id,
        "mode": task.mode,
        "config": {"index": task.config.index, "values": [list(kv) for kv in task.config.values]},
        "train_folds": list(task.train_folds),
        "epochs": task.epochs,
        "test_fold": task.test_fold,
        "val_fold": task.val_fold,
        "resume_from_epoch": task.resume_from_epoch,
        "seed": task.seed,
    }


def task_from_wire(payload: dict) -> TrainingTask:
    try:
        config = HyperparameterConfig(
            index=int(payload["config"]["index"]),
            values=tuple((str(k), str(v)) for k, v in payload["config"]["values"]),
        )
        return TrainingTask(
            run_id=str(payload["run_id"]),
            config=config,
            mode=str(payload["mode"]),
            train_folds=tuple(int(f) for f in payload["train_folds"]),
            epochs=int(payload["epochs"]),
            test_fold=payload.get("test_fold"),
            val_fold=payload.get("val_fold"),
            resume_from_epoch=int(payload.get("resume_from_epoch", 0)),
            seed=int(payload.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise WireError(f"malformed task payload: {exc}") from None


# -- newline-delimited JSON over text streams ------------------------------


def write_message(stream: IO[str], payload: dict) -> None:
    stream.write(json.dumps(payload, sort_keys=True) + "\n")
    stream.flush()


def read_message(stream: IO[str]) -> Optional[dict]:
    """Next message, or None on end of stream. Blank lines are skipped."""
    while True:
        line = stream.readline()
        if line == "":
            return None
        line = line.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WireError(f"undecodable message: {line[:200]!r} ({exc})") from None
        if not isinstance(payload, dict):
            raise WireError(f"message is not an object: {line[:200]!r}")
        return payload


# -- length-delimited JSON over sockets ------------------------------------

_LEN = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


def send_frame(sock: socket.socket, payload: dict) -> None:
    body = json.dumps(payload, sort_keys=True).encode("utf-8")
    sock.sendall(_LEN.pack(len(body)) + body)


def _recv_exact(sock: socket.socket, size: int) -> Optional[bytes]:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> Optional[dict]:
    """Next frame, or None on clean connection close."""
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise WireError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise WireError("connection closed mid-frame")
    payload = json.loads(body.decode("utf-8"))
    if not isinstance(payload, dict):
        raise WireError("frame is not an object")
    return payload

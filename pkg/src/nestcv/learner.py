"""Built-in numeric trainer: a one-hidden-layer network on manifest features.

Small enough to train in milliseconds, real enough to exercise every
hyperparameter axis: batch size, learning rate, per-epoch decay, momentum,
nesterov, and an architecture axis that maps to the hidden-layer width.
Training is deterministic given (seed, task): weight init and per-epoch
minibatch shuffles come from counter-derived generator streams, and the
optimizer state (weights, momentum buffers, epoch counter) is checkpointed
in full every epoch, so resume is bit-exact at any epoch boundary.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointStore
from .rng import SplitMix64, derive_state
from .trainer import (
    FINAL_TRAIN,
    DataContext,
    ProgressFn,
    TaskResult,
    TrainerFailure,
    TrainingTask,
    check_resume_blob,
)

# hidden-layer width stands in for the backbone choice
HIDDEN_WIDTH = {"ResNet50": 32, "InceptionV3": 48, "Xception": 64}

_ARRAY_ORDER = ("W1", "b1", "W2", "b2", "vW1", "vb1", "vW2", "vb2")
_MAGIC = b"TLCK"


@dataclass
class _NetState:
    epoch: int
    arrays: dict[str, np.ndarray]


def _pack_state(state: _NetState) -> bytes:
    """Fixed binary layout: magic, epoch, then each array as shape + raw f64."""
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack(">I", state.epoch))
    for name in _ARRAY_ORDER:
        arr = np.ascontiguousarray(state.arrays[name], dtype=np.float64)
        out.write(struct.pack(">B", arr.ndim))
        for dim in arr.shape:
            out.write(struct.pack(">I", dim))
        out.write(arr.tobytes())
    return out.getvalue()


def _unpack_state(blob: bytes) -> _NetState:
    buf = io.BytesIO(blob)
    if buf.read(4) != _MAGIC:
        raise TrainerFailure("model blob has wrong magic")
    (epoch,) = struct.unpack(">I", buf.read(4))
    arrays: dict[str, np.ndarray] = {}
    for name in _ARRAY_ORDER:
        (ndim,) = struct.unpack(">B", buf.read(1))
        shape = tuple(struct.unpack(">I", buf.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = buf.read(count * 8)
        arrays[name] = np.frombuffer(data, dtype=np.float64).reshape(shape).copy()
    return _NetState(epoch=epoch, arrays=arrays)


def _init_state(rng: SplitMix64, dim: int, hidden: int, classes: int) -> _NetState:
    # W1 gets a Xavier-uniform draw; the output layer starts at zero so an
    # untrained network ties every logit and argmax lands on class 0.
    limit = (6.0 / (dim + hidden)) ** 0.5
    w1 = np.empty((dim, hidden), dtype=np.float64)
    flat = w1.reshape(-1)
    for pos in range(flat.size):
        flat[pos] = (rng.next_float() * 2.0 - 1.0) * limit
    arrays = {
        "W1": w1,
        "b1": np.zeros(hidden, dtype=np.float64),
        "W2": np.zeros((hidden, classes), dtype=np.float64),
        "b2": np.zeros(classes, dtype=np.float64),
        "vW1": np.zeros((dim, hidden), dtype=np.float64),
        "vb1": np.zeros(hidden, dtype=np.float64),
        "vW2": np.zeros((hidden, classes), dtype=np.float64),
        "vb2": np.zeros(classes, dtype=np.float64),
    }
    return _NetState(epoch=0, arrays=arrays)


def _forward(arrays: dict[str, np.ndarray], x: np.ndarray):
    pre = x @ arrays["W1"] + arrays["b1"]
    hid = np.maximum(pre, 0.0)
    logits = hid @ arrays["W2"] + arrays["b2"]
    return pre, hid, logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def _gather_split(task: TrainingTask, data: DataContext):
    if data.manifest is None or data.folds is None:
        raise TrainerFailure("tiny learner needs a manifest and a fold assignment")
    manifest, folds = data.manifest, data.folds
    by_id = {item.item_id: item for item in manifest.items}

    def matrix(fold_indices):
        feats, labels = [], []
        for fold in fold_indices:
            for item_id in folds.items_in_fold(fold):
                item = by_id[item_id]
                if item.features is None:
                    raise TrainerFailure(f"item {item_id!r} has no features")
                feats.append(item.features)
                labels.append(manifest.label_index(item.label))
        dims = {len(f) for f in feats}
        if len(dims) > 1:
            raise TrainerFailure(f"feature dimension mismatch: {sorted(dims)}")
        return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64)

    x_train, y_train = matrix(task.train_folds)
    if task.mode == FINAL_TRAIN:
        x_eval, y_eval = x_train, y_train
    else:
        x_eval, y_eval = matrix([task.eval_fold])
    if x_train.size == 0 or x_eval.size == 0:
        raise TrainerFailure("empty training or evaluation split")
    return x_train, y_train, x_eval, y_eval


def _config_floats(task: TrainingTask):
    values = task.config.as_dict()
    try:
        hidden = HIDDEN_WIDTH[values["architecture"]]
        batch = int(values["batch_size"])
        lr = float(values["learning_rate"])
        decay = float(values["decay"])
        momentum = float(values["momentum"])
        nesterov = values["nesterov"] == "enabled"
    except KeyError as missing:
        raise TrainerFailure(f"config {task.config.index} missing axis {missing}") from None
    if batch < 1:
        raise TrainerFailure("batch_size must be >= 1")
    return hidden, batch, lr, decay, momentum, nesterov


@dataclass
class TinyLearnerBackend:
    """Mini-batch SGD on a ReLU network with full-state checkpoints."""

    def run_task(
        self,
        task: TrainingTask,
        data: DataContext,
        store: CheckpointStore,
        progress: ProgressFn | None = None,
    ) -> TaskResult:
        check_resume_blob(task, store)
        hidden, batch, lr0, decay, momentum, nesterov = _config_floats(task)
        x_train, y_train, x_eval, y_eval = _gather_split(task, data)
        classes = len(data.manifest.class_names)
        count, dim = x_train.shape

        if task.resume_from_epoch > 0:
            state = _unpack_state(store.load_model(task.task_id, task.resume_from_epoch))
            if state.epoch != task.resume_from_epoch:
                raise TrainerFailure(
                    f"blob epoch {state.epoch} != resume epoch {task.resume_from_epoch}"
                )
        else:
            rng = SplitMix64(derive_state(task.seed, task.task_id))
            state = _init_state(rng, dim, hidden, classes)

        arrays = state.arrays
        onehot = np.eye(classes, dtype=np.float64)
        ref = store.checkpoint_ref(task.task_id, state.epoch)
        for epoch in range(state.epoch + 1, task.epochs + 1):
            # decay counts completed epochs, so the first epoch runs undecayed
            lr = lr0 / (1.0 + decay * (epoch - 1))
            order = list(range(count))
            SplitMix64(derive_state(task.seed, task.task_id, "epoch", epoch)).shuffle(order)
            for start in range(0, count, batch):
                idx = order[start : start + batch]
                xb, yb = x_train[idx], y_train[idx]
                pre, hid, logits = _forward(arrays, xb)
                probs = _softmax(logits)
                loss = -np.mean(np.log(probs[np.arange(len(idx)), yb] + 1e-300))
                if not np.isfinite(loss):
                    raise TrainerFailure(f"non-finite loss at epoch {epoch}", last_epoch=epoch - 1)
                dlogits = (probs - onehot[yb]) / len(idx)
                grads = {
                    "W2": hid.T @ dlogits,
                    "b2": dlogits.sum(axis=0),
                }
                dhid = dlogits @ arrays["W2"].T
                dpre = dhid * (pre > 0.0)
                grads["W1"] = xb.T @ dpre
                grads["b1"] = dpre.sum(axis=0)
                for name, grad in grads.items():
                    vel = arrays["v" + name]
                    vel *= momentum
                    vel -= lr * grad
                    if nesterov:
                        arrays[name] += momentum * vel - lr * grad
                    else:
                        arrays[name] += vel
            state.epoch = epoch
            ref = store.save_model(task.task_id, epoch, _pack_state(state))
            if progress is not None:
                progress(epoch, _accuracy(arrays, x_eval, y_eval))

        metric = _accuracy(arrays, x_eval, y_eval)
        return TaskResult(task.task_id, metric, task.epochs, ref)


def _accuracy(arrays: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    _, _, logits = _forward(arrays, x)
    predicted = logits.argmax(axis=1)
    return float((predicted == y).mean())

"""SGD training loop, batched prediction and checkpoint files."""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointMismatch, NonFiniteLoss
from .model import ModelConfig, OrdinalNet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ODCKPT01"


@dataclass
class TrainTrace:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def append(self, it, loss, acc):
        self.iteration.append(it)
        self.loss.append(loss)
        self.accuracy.append(acc)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,loss,accuracy\n")
            for row in zip(self.iteration, self.loss, self.accuracy):
                fh.write("%d,%.8g,%.8g\n" % row)


def sgd_step(model, lr, weight_decay):
    """``w <- w - lr * (grad + weight_decay * w)`` for every parameter."""
    for (name, p), (_, g) in zip(model.named_params(), model.named_grads()):
        if g is None:
            g = 0.0
        p -= (lr * (g + weight_decay * p)).astype(p.dtype, copy=False)


def step_lr(base_lr, it, iterations, drop_at=0.75, factor=0.1):
    return base_lr * factor if it >= int(drop_at * iterations) else base_lr


def train(model, dataset, lr=0.01, weight_decay=0.0005, iterations=2000,
          batch_size=32, seed=0, lr_drop_at=0.75, callback=None):
    """Mini-batch SGD over ``dataset`` (anything with ``len`` and
    ``batch(indices) -> (inputs, labels)``).

    Batches walk through a fresh seeded permutation each epoch, so a run
    is fully determined by ``seed``.  Raises NonFiniteLoss on a NaN/inf loss,
    leaving the parameters of the last finite step in place.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    order, pos = rng.permutation(n), 0
    trace = TrainTrace()
    for it in range(iterations):
        if pos + batch_size > n and pos > 0:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        inputs, labels = dataset.batch(idx)
        snapshot = {k: v.copy() for k, v in model.named_buffers()}
        loss, logp = model.loss_and_grad(inputs, labels, train=True)
        if not np.isfinite(loss):
            model.load_state({**model.state(), **snapshot})
            raise NonFiniteLoss(f"loss became {loss} at iteration {it}")
        acc = float((logp.argmax(axis=1) == labels).mean())
        sgd_step(model, step_lr(lr, it, iterations, lr_drop_at), weight_decay)
        trace.append(it, loss, acc)
        if callback is not None:
            callback(it, loss, acc)
        elif it % 50 == 0:
            log.info("iter %d loss %.4f acc %.3f", it, loss, acc)
    return model, trace


def predict_proba(model, dataset, batch_size=64):
    """Class probabilities (N, 3) in eval mode, in dataset order."""
    out = []
    for start in range(0, len(dataset), batch_size):
        inputs, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        out.append(np.exp(model.forward(inputs, train=False)))
    return np.concatenate(out) if out else np.zeros((0, 3))


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model):
    """Magic, uint64 header length, JSON header, then little-endian float32
    arrays in header order."""
    state = model.state()
    header = {"config": model.config.to_dict(),
              "arrays": [[name, list(arr.shape)] for name, arr in state.items()]}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, config=None):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: unreadable header") from exc
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config != stored:
        raise CheckpointMismatch(f"{path}: checkpoint config {stored} differs from {config}")
    model = OrdinalNet(stored)
    expected = {name: list(arr.shape) for name, arr in model.state().items()}
    if dict(header["arrays"]) != expected:
        raise CheckpointMismatch(f"{path}: array names/shapes do not match the model")
    off, state = 16 + hlen, {}
    total = sum(4 * int(np.prod(shape)) for _, shape in header["arrays"])
    if off + total != len(raw):
        raise CheckpointMismatch(f"{path}: expected {total} data bytes, found {len(raw) - off}")
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        state[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
    model.load_state(state)
    return model

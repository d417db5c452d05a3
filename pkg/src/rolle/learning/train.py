"""Training loop: seeded split, Adam over generated batches, per-epoch MSEs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..datalog import Dataset
from ..perception import PreprocessConfig, preprocess
from .generator import (
    EmptyDatasetError,
    FrameCache,
    Hyperparams,
    batch_generator,
    batches_per_epoch,
)
from .model import (
    Model,
    NumericDivergenceError,
    forward,
    init_model,
    loss_and_grad,
    pilotnet_spec,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainDivergenceError(NumericDivergenceError):
    """Raised on divergence; carries the history completed so far."""

    def __init__(self, message, epoch, batch, history):
        super().__init__(message, epoch=epoch, batch=batch)
        self.history = history


@dataclass
class TrainHistory:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_mse)


class Adam:
    def __init__(self, params, lr: float):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1t = 1.0 - ADAM_BETA1 ** self.t
        b2t = 1.0 - ADAM_BETA2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)).astype(p.dtype)


def split_records(records, train_fraction: float, seed: int):
    """Deterministic shuffled split; returns (train, validation) lists."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    cut = int(len(records) * train_fraction)
    train = [records[i] for i in perm[:cut]]
    val = [records[i] for i in perm[cut:]]
    return train, val


def _validation_tensors(frames: FrameCache, records, cfg: PreprocessConfig):
    xs = np.empty((len(records), 3, cfg.out_height, cfg.out_width), dtype=np.float32)
    ys = np.empty((len(records),), dtype=np.float32)
    for i, r in enumerate(records):
        xs[i] = preprocess(frames.get(r), cfg).planes
        ys[i] = r.steering
    return xs, ys


def _mse_on(model: Model, xs: np.ndarray, ys: np.ndarray, batch_size: int) -> float:
    if xs.shape[0] == 0:
        return float("nan")
    total = 0.0
    for i in range(0, xs.shape[0], batch_size):
        preds = forward(model, xs[i : i + batch_size])
        d = preds.astype(np.float64) - ys[i : i + batch_size].astype(np.float64)
        total += float(np.sum(d * d))
    return total / xs.shape[0]


def train(
    ds: Dataset,
    h: Hyperparams,
    preprocess_cfg: PreprocessConfig | None = None,
    progress=None,
):
    """Train the steering network on a recorded run.

    Returns (model, history). The result is fully determined by the dataset
    and hyperparameters (including the seed) in single-threaded mode.
    """
    if len(ds.records) == 0:
        raise EmptyDatasetError("dataset has no records")
    cfg = preprocess_cfg or PreprocessConfig()
    train_records, val_records = split_records(ds.records, h.train_fraction, h.seed)
    if not train_records:
        raise EmptyDatasetError("training split is empty")

    frames = FrameCache(ds)
    model = init_model(pilotnet_spec(), seed=h.seed)
    optimizer = Adam(model.parameters(), h.learning_rate)
    batches = batch_generator(frames, train_records, h, preprocess_cfg=cfg)
    per_epoch = batches_per_epoch(h)

    val_xs, val_ys = _validation_tensors(frames, val_records, cfg)
    history = TrainHistory()
    for epoch in range(h.epochs):
        sq_sum = 0.0
        seen = 0
        for b in range(per_epoch):
            xs, ys = next(batches)
            try:
                mse, grads = loss_and_grad(model, xs, ys)
            except NumericDivergenceError as e:
                raise TrainDivergenceError(
                    f"training diverged at epoch {epoch + 1} batch {b + 1}: {e}",
                    epoch=epoch + 1,
                    batch=b + 1,
                    history=history,
                ) from None
            if h.learning_rate > 0:
                optimizer.step(model.parameters(), grads)
            sq_sum += mse * xs.shape[0]
            seen += xs.shape[0]
        epoch_train = sq_sum / seen
        epoch_val = _mse_on(model, val_xs, val_ys, h.batch_size)
        history.train_mse.append(epoch_train)
        history.val_mse.append(epoch_val)
        log.info("epoch %d/%d train_mse=%.6f val_mse=%.6f",
                 epoch + 1, h.epochs, epoch_train, epoch_val)
        if progress is not None:
            progress(epoch + 1, epoch_train, epoch_val)
    return model, history


def save_history(history: TrainHistory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for i, (t, v) in enumerate(zip(history.train_mse, history.val_mse), start=1):
            writer.writerow([i, f"{t:.6f}", f"{v:.6f}"])


def load_history(path) -> TrainHistory:
    history = TrainHistory()
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["epoch", "train_mse", "val_mse"]:
            raise ValueError(f"unexpected history header {header!r}")
        for row in reader:
            if not row:
                continue
            history.train_mse.append(float(row[1]))
            history.val_mse.append(float(row[2]))
    return history

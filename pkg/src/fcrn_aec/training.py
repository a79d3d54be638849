"""Training targets, sequence batching and the optimization loop."""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .signals import pack, padded_stft


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 50
    lr_init: float = 5e-5
    lr_factor: float = 0.6
    lr_patience: int = 3
    stop_lr: float = 5e-6
    stop_patience: int = 10
    seed: int = 0
    max_epochs: int = 1000

    def __post_init__(self):
        for name in ("batch_size", "seq_len", "lr_init", "lr_factor", "lr_patience",
                     "stop_lr", "stop_patience", "max_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.stop_lr < self.lr_init:
            raise ValueError("stop_lr must be below lr_init")


# -- features ------------------------------------------------------------------

def features(signal, frame_length, M):
    """Packed spectra of a time signal in training layout (T, M, 2)."""
    return pack(padded_stft(signal, frame_length, frame_length // 2), M).transpose(1, 0, 2)


def target_signal(variant, mixture):
    if variant == "OutE_clean":
        return mixture.s
    if variant == "OutE_noisy":
        return mixture.s + mixture.n
    if variant == "OutD":
        return mixture.d
    raise ValueError(f"unknown target variant {variant!r}")


def make_targets(variant, mixture, frame_length=512, M=260):
    """Target feature tensor (M, T, 2) for one mixture."""
    return features(target_signal(variant, mixture), frame_length, M).transpose(1, 0, 2)


@dataclass
class Example:
    mic: np.ndarray  # (T, M, C)
    ref: np.ndarray
    target: np.ndarray
    mask: np.ndarray = None  # (T,), 1 for valid frames

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.mic.shape[0])
        if not (self.mic.shape == self.ref.shape == self.target.shape):
            raise ValueError("mic, ref and target features must share one shape")


def make_example(mixture, variant, frame_length, M):
    return Example(features(mixture.y, frame_length, M), features(mixture.x, frame_length, M),
                   features(target_signal(variant, mixture), frame_length, M))


@dataclass
class Batch:
    mic: np.ndarray  # (B, S, M, C)
    ref: np.ndarray
    target: np.ndarray
    mask: np.ndarray  # (B, S)


def sequences(examples, seq_len):
    """Cut every example into seq_len-frame chunks; the remainder is zero-padded and masked."""
    out = []
    for ex in examples:
        T = ex.mic.shape[0]
        for start in range(0, T, seq_len):
            stop = min(start + seq_len, T)
            chunk = []
            for arr in (ex.mic, ex.ref, ex.target):
                seg = np.zeros((seq_len,) + arr.shape[1:])
                seg[:stop - start] = arr[start:stop]
                chunk.append(seg)
            mask = np.zeros(seq_len)
            mask[:stop - start] = ex.mask[start:stop]
            if mask.any():
                out.append((*chunk, mask))
    return out


def make_batches(examples, cfg, epoch=0, shuffle=True):
    """Batches of cfg.batch_size sequences of cfg.seq_len frames, order seeded per epoch."""
    seqs = sequences(examples, cfg.seq_len)
    if not seqs:
        raise TrainingError("no training sequences (empty manifest?)")
    order = np.arange(len(seqs))
    if shuffle:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(seqs))
    batches = []
    for i in range(0, len(order), cfg.batch_size):
        idx = order[i:i + cfg.batch_size]
        parts = [np.stack([seqs[j][k] for j in idx]) for k in range(4)]
        batches.append(Batch(*parts))
    return batches


def batch_loss(model, batch):
    """Masked MSE; the recurrent state starts from zero for every sequence."""
    out, _ = model.graph(batch.mic, batch.ref)
    return ad.mse_loss(out, batch.target, batch.mask)


def evaluate_loss(model, batches):
    """Frame-weighted mean loss over batches (padding contributes nothing)."""
    total, count = 0.0, 0.0
    with ad.no_grad():
        for b in batches:
            n = b.mask.sum()
            total += float(batch_loss(model, b).value) * n
            count += n
    return total / count


# -- schedule --------------------------------------------------------------------

class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement;
    stop once it falls below ``stop_lr`` or after ``stop_patience`` epochs without
    improvement. Any strictly lower loss counts as an improvement."""

    def __init__(self, lr_init, factor=0.6, patience=3, stop_lr=5e-6, stop_patience=10):
        self.lr = lr_init
        self.factor = factor
        self.patience = patience
        self.stop_lr = stop_lr
        self.stop_patience = stop_patience
        self.best = math.inf
        self.since_best = 0
        self._bad = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.lr_init, cfg.lr_factor, cfg.lr_patience, cfg.stop_lr, cfg.stop_patience)

    def step(self, loss):
        """Record one epoch's monitored loss; returns (improved, stop reason or None)."""
        improved = loss < self.best
        if improved:
            self.best = loss
            self.since_best = 0
            self._bad = 0
        else:
            self.since_best += 1
            self._bad += 1
            if self._bad >= self.patience:
                self.lr *= self.factor
                self._bad = 0
        if self.lr < self.stop_lr:
            return improved, f"learning rate {self.lr:.3g} dropped below {self.stop_lr:.3g}"
        if self.since_best >= self.stop_patience:
            return improved, f"no improvement for {self.since_best} epochs"
        return improved, None


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    stop_reason: str = ""

    def write(self, path):
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(json.dumps({"stop_reason": self.stop_reason}) + "\n")

    @property
    def train_losses(self):
        return [r["train_loss"] for r in self.epochs]


def train(model, train_examples, cfg, val_examples=None, log_path=None, progress=None):
    """Adam on masked MSE with the plateau schedule; returns (model, TrainLog).

    Validation loss drives the schedule (training loss when no validation set is
    given). The parameters with the best monitored loss are restored at the end.
    """
    sched = PlateauSchedule.from_config(cfg)
    log = TrainLog()
    val_batches = make_batches(val_examples, cfg, shuffle=False) if val_examples else None
    best = model.params.snapshot()
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = sched.lr
        total, count = 0.0, 0.0
        for batch in make_batches(train_examples, cfg, epoch):
            model.params.zero_grad()
            loss = batch_loss(model, batch)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} in epoch {epoch}; lr={lr:.3g}")
            ad.backward(loss, model.params)
            ad.adam_step(model.params, lr)
            n = batch.mask.sum()
            total += value * n
            count += n
        train_loss = total / count
        monitored = evaluate_loss(model, val_batches) if val_batches else train_loss
        if not math.isfinite(monitored):
            raise TrainingError(f"non-finite validation loss in epoch {epoch}")
        improved, reason = sched.step(monitored)
        if improved:
            best = model.params.snapshot()
        rec = {"epoch": epoch, "train_loss": train_loss,
               "val_loss": monitored if val_batches else None,
               "lr": lr, "wall_time": time.perf_counter() - t0}
        log.epochs.append(rec)
        if progress:
            progress(rec)
        if reason:
            log.stop_reason = reason
            break
    else:
        log.stop_reason = f"reached max_epochs={cfg.max_epochs}"
    model.params.restore(best)
    if log_path:
        log.write(log_path)
    return model, log


def config_dict(cfg):
    return asdict(cfg)

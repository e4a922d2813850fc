"""Label-smoothed cross-entropy, Adam, and the epoch loop with model selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import TFT, NumericFault
from .tensor import Rng, Tensor, as_tensor, dropout, log

__all__ = [
    "TrainConfig",
    "Adam",
    "EpochRecord",
    "TrainResult",
    "TrainingDiverged",
    "smoothed_cross_entropy",
    "cross_entropy",
    "smoothed_targets",
    "dropout",
    "train",
    "write_history",
    "read_history",
]

log_ = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class TrainingDiverged(NumericFault):
    """Loss became non-finite; ``best_state`` holds the last good parameters."""

    def __init__(self, msg, best_state=None, history=None):
        super().__init__(msg)
        self.best_state = best_state
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 40
    lr: float = 1e-3
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


# ---------------------------------------------------------------------------
# losses


def _labels(labels, n_cla: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(labels))
    if y.dtype.kind not in "iu":
        raise ValueError(f"labels must be integers, got {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= n_cla):
        raise ValueError(f"label out of range [0, {n_cla})")
    return y.astype(np.int64)


def smoothed_targets(labels, n_cla: int, eps_ls: float) -> np.ndarray:
    """(1 - eps) * onehot + eps / n_cla."""
    y = _labels(labels, n_cla)
    q = np.full((y.size, n_cla), eps_ls / n_cla)
    q[np.arange(y.size), y] += 1.0 - eps_ls
    return q


def smoothed_cross_entropy(probabilities, labels, eps_ls: float = 0.1) -> Tensor:
    """Mean over the batch of ``-sum_k q_k ln(p_k + 1e-12)``."""
    p = as_tensor(probabilities)
    batched = p.ndim == 2
    n_cla = p.shape[-1]
    q = smoothed_targets(labels, n_cla, eps_ls)
    if not batched:
        q = q[0]
    logp = log(p + LOG_FLOOR)
    per_sample = -(logp * q).sum(axis=-1)
    return per_sample.mean() if batched else per_sample


def cross_entropy(probabilities, labels) -> Tensor:
    """Standard cross-entropy ``-ln(p_y + 1e-12)``, batch mean."""
    p = as_tensor(probabilities)
    if p.ndim == 1:
        y = _labels(labels, p.shape[0])[0]
        return -log(p[y] + LOG_FLOOR)
    y = _labels(labels, p.shape[-1])
    picked = log(p + LOG_FLOOR)[np.arange(y.size), y]
    return (-picked).mean()


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias-corrected moments; one instance per parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericFault(f"non-finite gradient for parameter {k}")
            grads[k] = g
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def to_line(self) -> str:
        return (f"{self.epoch}\t{self.train_loss!r}\t{self.train_acc!r}"
                f"\t{self.val_loss!r}\t{self.val_acc!r}")


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    steps: int
    final_state: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate_loss_acc(model: TFT, x: np.ndarray, y: np.ndarray, eps_ls: float,
                      batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode mean loss and accuracy (argmax ties go to the lowest index)."""
    if len(x) == 0:
        return math.nan, math.nan
    probs = model.predict_proba(x, batch_size)
    loss = smoothed_cross_entropy(probs, y, eps_ls).item()
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, acc


def train(model: TFT, train_data: tuple[np.ndarray, np.ndarray], val_data: tuple[np.ndarray, np.ndarray],
          cfg: TrainConfig, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Mini-batch Adam training; keeps the parameters with the best validation accuracy.

    Ties in accuracy go to the lower validation loss. Partial final batches
    are kept. With an empty validation set the training metrics drive
    selection instead.
    """
    x_tr, y_tr = train_data
    x_va, y_va = val_data
    if len(x_tr) == 0:
        raise ValueError("training set is empty")
    root = Rng(cfg.seed)
    shuffle_rng = root.child(1)
    drop_rng = root.child(2)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[EpochRecord] = []
    best_state = model.state()
    best_epoch, best_score = 0, (-math.inf, -math.inf)
    since_best = 0
    n = len(x_tr)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            try:
                out = model(x_tr[idx], training=True, rng=drop_rng)
            except NumericFault as exc:
                raise TrainingDiverged(str(exc), best_state, history) from exc
            loss = smoothed_cross_entropy(out.probabilities, y_tr[idx], cfg.label_smoothing)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", best_state, history)
            loss.backward()
            opt.step()
        tr_loss, tr_acc = evaluate_loss_acc(model, x_tr, y_tr, cfg.label_smoothing)
        va_loss, va_acc = evaluate_loss_acc(model, x_va, y_va, cfg.label_smoothing)
        if not math.isfinite(tr_loss):
            raise TrainingDiverged(f"training loss non-finite after epoch {epoch}", best_state, history)
        rec = EpochRecord(epoch, tr_loss, tr_acc, va_loss, va_acc)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log_.debug(rec.to_line())
        # accuracy first, lower loss breaks ties once accuracy saturates
        score = (va_acc, -va_loss) if len(x_va) else (tr_acc, -tr_loss)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                break
    return TrainResult(history, best_state, best_epoch, opt.t, model.state())


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(rec.to_line() + "\n")


def read_history(path) -> list[EpochRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            e, a, b, c, d = line.split("\t")
            out.append(EpochRecord(int(e), float(a), float(b), float(c), float(d)))
    return out

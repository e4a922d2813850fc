"""Test metrics, repeated trials, attention summaries, features and SNR sweeps."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import TFT, AttentionRecord, ConfigError
from .signals import DatasetSpec, ManifestRow, class_roster, synthesize_sample
from .tensor import no_grad


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns predicted labels."""

    counts: np.ndarray
    class_names: tuple = ()

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_cla: int, class_names=()) -> "ConfusionMatrix":
        counts = np.zeros((n_cla, n_cla), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else math.nan

    def to_text(self) -> str:
        n = self.counts.shape[0]
        names = list(self.class_names) or [str(i) for i in range(n)]
        width = max(6, max(len(s) for s in names), len(str(self.counts.max(initial=0))))
        head = "true\\pred".ljust(width) + "".join(s.rjust(width + 1) for s in names)
        lines = [head]
        for name, row in zip(names, self.counts):
            lines.append(name.ljust(width) + "".join(str(v).rjust(width + 1) for v in row))
        return "\n".join(lines) + "\n"


def predict(model: TFT, x: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and argmax labels; ties resolve to the lowest class index."""
    cfg = model.config
    want = (cfg.n_t, cfg.n_f, cfg.c)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ConfigError(f"sample shape {tuple(x.shape[1:])} does not match model input shape {want}")
    probs = model.predict_proba(x, batch_size)
    return probs, np.argmax(probs, axis=1)


def evaluate(model: TFT, x: np.ndarray, y: np.ndarray, class_names=()) -> tuple[float, ConfusionMatrix]:
    _, pred = predict(model, x)
    cm = ConfusionMatrix.from_predictions(y, pred, model.config.n_cla, class_names)
    return cm.accuracy, cm


@dataclass
class TrialStats:
    accuracies: tuple

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def best(self) -> float:
        return float(np.max(self.accuracies))

    @property
    def std(self) -> float:
        # population standard deviation over trials
        return float(np.std(self.accuracies))

    def to_text(self) -> str:
        rows = [f"trial_{i}\t{a!r}" for i, a in enumerate(self.accuracies)]
        rows += [f"mean\t{self.mean!r}", f"best\t{self.best!r}", f"std\t{self.std!r}"]
        return "\n".join(rows) + "\n"


def repeated_trials(recipe: Callable[[int], float], seeds: Sequence[int]) -> TrialStats:
    """Run ``recipe(seed) -> accuracy`` per seed; failed trials are skipped with a warning."""
    if len(seeds) < 2:
        raise ValueError("need at least two trials")
    accs = []
    for s in seeds:
        try:
            accs.append(float(recipe(s)))
        except Exception as exc:  # noqa: BLE001 - a failed trial must not sink the others
            warnings.warn(f"trial with seed {s} failed: {exc!r}", RuntimeWarning, stacklevel=2)
    if not accs:
        raise RuntimeError("every trial failed")
    return TrialStats(tuple(accs))


# ---------------------------------------------------------------------------
# attention


def attention_summary(record: AttentionRecord, block: int, sample: int | None = None) -> np.ndarray:
    """Head-summed class-token attention row of ``block`` (1-based), min-max scaled to [0, 1].

    A constant row maps to all zeros.
    """
    w = record.block(block)
    if w.ndim == 4:
        w = w[0 if sample is None else sample]
    row = w.sum(axis=0)[0]
    lo, hi = row.min(), row.max()
    if hi == lo:
        return np.zeros_like(row)
    return (row - lo) / (hi - lo)


def head_summed(record: AttentionRecord, block: int, sample: int = 0) -> np.ndarray:
    w = record.block(block)
    if w.ndim == 4:
        w = w[sample]
    return w.sum(axis=0)


def write_attention_table(path, summary: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, v in enumerate(summary):
            fh.write(f"{i}\t{float(v)!r}\n")


def write_pgm(path, matrix: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    img = np.rint(scaled * 255.0).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


# ---------------------------------------------------------------------------
# hidden features


def hidden_features(model: TFT, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(x[i:i + batch_size]).hidden.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.d_model))


def export_hidden_features(model: TFT, x: np.ndarray, rows: Sequence[ManifestRow], path) -> np.ndarray:
    """Write ``label, rpm, z_0...`` per sample as tab-separated text; returns the feature matrix."""
    feats = hidden_features(model, x)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r, f in zip(rows, feats):
                fh.write("\t".join([str(r.label), f"{r.rpm:g}"] + [repr(float(v)) for v in f]) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write feature table {path}: {exc}") from exc
    return feats


def separability(features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean pairwise centroid distance, mean within-class distance to centroid)."""
    classes = np.unique(labels)
    cents = np.stack([features[labels == c].mean(axis=0) for c in classes])
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    k = len(classes)
    between = dist[np.triu_indices(k, 1)].mean() if k > 1 else 0.0
    within = np.mean([np.linalg.norm(features[labels == c] - cents[i], axis=1).mean()
                      for i, c in enumerate(classes)])
    return float(between), float(within)


# ---------------------------------------------------------------------------
# noise robustness


def regenerate(rows: Sequence[ManifestRow], ds: DatasetSpec, snr_db: float) -> np.ndarray:
    """Rebuild the TFRs of ``rows`` from their seeds with noise at ``snr_db``."""
    specs = {s.class_id: s for s in class_roster(ds.n_classes, sample_rate=ds.sample_rate,
                                                  length=ds.length, rpm=ds.rpm)}
    return np.stack([synthesize_sample(specs[r.label], r.seed, ds, snr_db) for r in rows])


def snr_sweep(model: TFT, rows: Sequence[ManifestRow], ds: DatasetSpec,
              snr_list: Iterable[float]) -> list[tuple[float, float]]:
    """Accuracy on noise-corrupted copies of the test rows, one entry per SNR.

    A failing SNR point is reported as NaN and the sweep continues.
    """
    y = np.array([r.label for r in rows])
    out = []
    for snr in snr_list:
        try:
            x = regenerate(rows, ds, float(snr))
            acc, _ = evaluate(model, x, y)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"SNR {snr} dB failed: {exc!r}", RuntimeWarning, stacklevel=2)
            acc = math.nan
        out.append((float(snr), acc))
    return out


def write_snr_table(path, table: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for snr, acc in table:
            fh.write(f"{snr:g}\t{float(acc)!r}\n")

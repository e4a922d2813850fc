"""Hot inner loops of the signal pipeline.

Each kernel has a numba implementation and a pure-numpy twin with the same
signature. The numba path is used when numba imports cleanly and the
environment variable ``TFTDIAG_NUMBA`` is not set to ``0``. Both paths are
exercised by the test-suite and compared in ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    numba_available = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_available = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _env_enabled() -> bool:
    return os.environ.get("TFTDIAG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


NUMBA_ENABLED = numba_available and _env_enabled()


def set_backend(name: str) -> None:
    """Switch between ``"numba"`` and ``"numpy"`` at runtime."""
    global NUMBA_ENABLED
    if name == "numba":
        if not numba_available:
            raise RuntimeError("numba is not importable")
        NUMBA_ENABLED = True
    elif name == "numpy":
        NUMBA_ENABLED = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# synchrosqueezing scatter


def _squeeze_accumulate_numpy(mag, bins, n_bins):
    n_scales, n = mag.shape
    out = np.zeros(n * n_bins)
    keep = bins >= 0
    t_idx = np.broadcast_to(np.arange(n), (n_scales, n))[keep]
    flat = t_idx * n_bins + bins[keep]
    # bincount sums in input order, so scales are accumulated in ascending order
    # per cell, matching the loop kernel
    out += np.bincount(flat, weights=mag[keep], minlength=n * n_bins)
    return out.reshape(n, n_bins)


@njit(cache=True)
def _squeeze_accumulate_numba(mag, bins, n_bins):
    n_scales, n = mag.shape
    out = np.zeros((n, n_bins))
    for s in range(n_scales):
        for t in range(n):
            k = bins[s, t]
            if k >= 0:
                out[t, k] += mag[s, t]
    return out


def squeeze_accumulate(mag: np.ndarray, bins: np.ndarray, n_bins: int) -> np.ndarray:
    """Sum ``mag[s, t]`` into ``out[t, bins[s, t]]``; negative bins are skipped."""
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    if NUMBA_ENABLED:
        return _squeeze_accumulate_numba(mag, bins, int(n_bins))
    return _squeeze_accumulate_numpy(mag, bins, int(n_bins))


# ---------------------------------------------------------------------------
# separable cubic resampling along axis 0


def _cubic_rows_numpy(img, idx, w):
    centre = img[idx[:, 1]]
    acc = centre.copy()
    for k in (0, 2, 3):
        acc += w[:, k, None] * (img[idx[:, k]] - centre)
    return acc


@njit(cache=True)
def _cubic_rows_numba(img, idx, w):
    m = idx.shape[0]
    ncol = img.shape[1]
    out = np.empty((m, ncol))
    for i in range(m):
        i0 = idx[i, 0]
        i1 = idx[i, 1]
        i2 = idx[i, 2]
        i3 = idx[i, 3]
        w0 = w[i, 0]
        w2 = w[i, 2]
        w3 = w[i, 3]
        for j in range(ncol):
            c = img[i1, j]
            acc = c
            acc += w0 * (img[i0, j] - c)
            acc += w2 * (img[i2, j] - c)
            acc += w3 * (img[i3, j] - c)
            out[i, j] = acc
    return out


def cubic_rows(img: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Resample rows of ``img`` with 4-tap stencils.

    Evaluated as ``x1 + sum_k w_k (x_k - x1)`` over the three off-centre taps,
    which equals ``sum_k w_k x_k`` when the weights form a partition of unity
    and reproduces constant rows bit-exactly.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if NUMBA_ENABLED:
        return _cubic_rows_numba(img, idx, w)
    return _cubic_rows_numpy(img, idx, w)


# ---------------------------------------------------------------------------
# damped impact train


def _impact_train_numpy(t, onsets, amplitudes, damping, freq, phase):
    out = np.zeros_like(t)
    for onset, amp in zip(onsets, amplitudes):
        tau = t - onset
        live = tau >= 0.0
        tl = tau[live]
        out[live] += amp * np.exp(-damping * tl) * np.sin(2.0 * np.pi * freq * tl + phase)
    return out


@njit(cache=True)
def _impact_train_numba(t, onsets, amplitudes, damping, freq, phase):
    n = t.shape[0]
    out = np.zeros(n)
    two_pi_f = 2.0 * np.pi * freq
    for k in range(onsets.shape[0]):
        onset = onsets[k]
        amp = amplitudes[k]
        for i in range(n):
            tau = t[i] - onset
            if tau >= 0.0:
                out[i] += amp * np.exp(-damping * tau) * np.sin(two_pi_f * tau + phase)
    return out


def impact_train(t, onsets, amplitudes, damping: float, freq: float, phase: float = 0.0) -> np.ndarray:
    """Superpose exponentially decaying sinusoidal rings started at ``onsets``."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    onsets = np.ascontiguousarray(onsets, dtype=np.float64)
    amplitudes = np.ascontiguousarray(amplitudes, dtype=np.float64)
    if NUMBA_ENABLED:
        return _impact_train_numba(t, onsets, amplitudes, float(damping), float(freq), float(phase))
    return _impact_train_numpy(t, onsets, amplitudes, float(damping), float(freq), float(phase))

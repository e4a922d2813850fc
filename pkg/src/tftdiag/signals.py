"""Synthetic bearing vibration, synchrosqueezed wavelet TFRs and dataset files.

The real test-rig recordings are not available, so each health condition is
emulated by a parameter preset: a shaft tone plus trains of exponentially
damped resonance rings triggered at the defect's impact rate. Signals are
turned into time-major magnitude maps by an analytic-Morlet CWT followed by
synchrosqueezing, then resized with a Keys cubic kernel.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Rng

CLASS_NAMES = ("normal", "IRF", "IRWF", "ORF", "ORWF", "IORF", "IORWF")
# strong faults first so that small rosters stay well separated
DESK_ORDER = ("normal", "IRF", "ORF", "IORF", "IRWF", "ORWF", "IORWF")

TFR_MAGIC = b"TFR1"
WEAK_FACTOR = 0.25


class SpecError(ValueError):
    """Signal preset violates a physical constraint."""


class SnrError(ValueError):
    """SNR is undefined for the given signal."""


class StratificationError(ValueError):
    """A class is too small to appear in every requested split."""


class TfrFormatError(ValueError):
    """Sample file is malformed."""


@dataclass(frozen=True)
class SignalSpec:
    class_id: int
    name: str = "normal"
    sample_rate: float = 12800.0
    length: int = 1024
    shaft_hz: float = 17.5
    shaft_amplitude: float = 0.1
    fault_hz: float = 0.0
    resonance_hz: float = 3000.0
    damping: float = 600.0
    modulation_depth: float = 0.0
    impact_amplitude: float = 1.0
    # second impact train for compound defects; fault_hz_2 == 0 disables it
    fault_hz_2: float = 0.0
    resonance_hz_2: float = 3000.0
    noise_floor: float = 0.05

    def validate(self) -> None:
        nyq = self.sample_rate / 2.0
        if self.length < 1 or self.sample_rate <= 0:
            raise SpecError("length and sample_rate must be positive")
        if not 0.0 < self.shaft_hz < nyq:
            raise SpecError(f"shaft_hz={self.shaft_hz} outside (0, {nyq})")
        for f, r in ((self.fault_hz, self.resonance_hz), (self.fault_hz_2, self.resonance_hz_2)):
            if f:
                if not 0.0 < f < nyq:
                    raise SpecError(f"fault_hz={f} outside (0, {nyq})")
                if not 0.0 < r < nyq:
                    raise SpecError(f"resonance_hz={r} outside (0, {nyq})")
        if self.damping <= 0:
            raise SpecError("damping must be positive")
        if not 0.0 <= self.modulation_depth <= 1.0:
            raise SpecError("modulation_depth must lie in [0, 1]")
        if self.noise_floor < 0:
            raise SpecError("noise_floor must be non-negative")

    @property
    def rpm(self) -> float:
        return self.shaft_hz * 60.0


def class_preset(name: str, class_id: int, sample_rate: float = 12800.0, length: int = 1024,
                 rpm: float = 1050.0) -> SignalSpec:
    """Parameter preset for one of the seven health conditions in ``CLASS_NAMES``."""
    fr = rpm / 60.0
    bpfo, bpfi = 3.02 * fr, 4.98 * fr
    base = SignalSpec(class_id=class_id, name=name, sample_rate=sample_rate, length=length, shaft_hz=fr)
    weak = name.endswith("WF")
    amp = WEAK_FACTOR if weak else 1.0
    kind = name[:-2] if weak else name[:-1] if name != "normal" else "normal"
    if kind == "normal":
        return base
    if kind == "IR":
        return replace(base, fault_hz=bpfi, resonance_hz=3300.0, modulation_depth=0.5, impact_amplitude=amp)
    if kind == "OR":
        return replace(base, fault_hz=bpfo, resonance_hz=2700.0, impact_amplitude=amp)
    if kind == "IOR":
        return replace(base, fault_hz=bpfi, resonance_hz=3300.0, modulation_depth=0.5, impact_amplitude=amp,
                       fault_hz_2=bpfo, resonance_hz_2=2700.0)
    raise KeyError(name)


def class_roster(n_classes: int, **kw) -> list[SignalSpec]:
    if not 2 <= n_classes <= len(DESK_ORDER):
        raise ValueError(f"n_classes must be in [2, {len(DESK_ORDER)}]")
    return [class_preset(name, i, **kw) for i, name in enumerate(DESK_ORDER[:n_classes])]


# ---------------------------------------------------------------------------
# signal synthesis


def _onsets(fault_hz: float, duration: float, rng: Rng) -> np.ndarray:
    period = 1.0 / fault_hz
    t = rng.uniform(0.0, period)
    out = []
    while t < duration:
        out.append(t)
        t += period * (1.0 + rng.uniform(-0.01, 0.01))
    return np.asarray(out)


def _draw_plan(spec: SignalSpec, rng: Rng) -> dict:
    duration = spec.length / spec.sample_rate
    plan = {"shaft_phase": rng.uniform(0.0, 2.0 * math.pi)}
    if spec.fault_hz:
        plan["onsets"] = _onsets(spec.fault_hz, duration, rng)
    if spec.fault_hz_2:
        plan["onsets_2"] = _onsets(spec.fault_hz_2, duration, rng)
    return plan


def _render(spec: SignalSpec, plan: dict, rng: Rng, carrier_phase: float = 0.0) -> np.ndarray:
    t = np.arange(spec.length) / spec.sample_rate
    x = spec.shaft_amplitude * np.sin(2.0 * math.pi * spec.shaft_hz * t + plan["shaft_phase"])
    if spec.fault_hz:
        on = plan["onsets"]
        # inner-race impacts are modulated by the load zone as the race rotates
        amps = spec.impact_amplitude * (
            1.0 + spec.modulation_depth * np.sin(2.0 * math.pi * spec.shaft_hz * on + plan["shaft_phase"]))
        x = x + kernels.impact_train(t, on, amps, spec.damping, spec.resonance_hz, carrier_phase)
    if spec.fault_hz_2:
        on = plan["onsets_2"]
        amps = np.full(on.shape, spec.impact_amplitude)
        x = x + kernels.impact_train(t, on, amps, spec.damping, spec.resonance_hz_2, carrier_phase)
    if spec.noise_floor > 0:
        x = x + rng.normal(0.0, spec.noise_floor, spec.length)
    return x


def generate_signal(spec: SignalSpec, rng: Rng) -> np.ndarray:
    """One vibration record of ``spec.length`` samples."""
    spec.validate()
    return _render(spec, _draw_plan(spec, rng), rng)


def generate_channels(spec: SignalSpec, rng: Rng, channels: int = 1) -> np.ndarray:
    """``channels`` x length record; channels share impact timing, differ in carrier phase and noise."""
    spec.validate()
    if channels == 1:
        return generate_signal(spec, rng)[None, :]
    plan = _draw_plan(spec, rng)
    return np.stack([_render(spec, plan, rng, 2.0 * math.pi * k / channels) for k in range(channels)])


def inject_noise(signal, snr_db: float, rng: Rng) -> np.ndarray:
    """Add white Gaussian noise at ``snr_db`` relative to the mean-square of ``signal``.

    ``snr_db = inf`` returns an unchanged copy.
    """
    x = np.asarray(signal, dtype=np.float64)
    if math.isnan(snr_db):
        raise SnrError("snr_db is NaN")
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    p_sig = float(np.mean(x * x))
    if p_sig == 0.0:
        raise SnrError("SNR is undefined for an all-zero signal")
    p_noise = p_sig / 10.0 ** (snr_db / 10.0)
    return x + rng.normal(0.0, math.sqrt(p_noise), x.shape)


# ---------------------------------------------------------------------------
# wavelet transforms


@dataclass(frozen=True)
class WaveletPlan:
    sample_rate: float
    fmin: float
    fmax: float
    n_bins: int = 128
    omega0: float = 6.0
    voices: int = 16
    gamma_rel: float = 1e-8

    @classmethod
    def default(cls, n: int, sample_rate: float, n_bins: int = 128, **kw) -> "WaveletPlan":
        return cls(sample_rate=sample_rate, fmin=4.0 * sample_rate / n, fmax=sample_rate / 2.0, n_bins=n_bins, **kw)

    def __post_init__(self):
        if not 0 < self.fmin < self.fmax:
            raise ValueError("need 0 < fmin < fmax")
        if self.n_bins < 2 or self.voices < 1 or self.gamma_rel <= 0 or self.omega0 <= 0:
            raise ValueError("invalid wavelet plan")

    @property
    def scale_freqs(self) -> np.ndarray:
        """Centre frequency (Hz) of each scale, descending."""
        octaves = math.log2(self.fmax / self.fmin)
        j = np.arange(int(math.floor(octaves * self.voices)) + 1)
        return self.fmax * 2.0 ** (-j / self.voices)

    @property
    def scales(self) -> np.ndarray:
        """Scales in samples, strictly increasing."""
        return self.omega0 * self.sample_rate / (2.0 * math.pi * self.scale_freqs)

    @property
    def bin_freqs(self) -> np.ndarray:
        return np.linspace(self.fmin, self.fmax, self.n_bins)


def morlet_hat(w: np.ndarray, omega0: float) -> np.ndarray:
    """Analytic Morlet in the frequency domain, scaled so a unit tone peaks at |W| = 1."""
    out = np.zeros_like(w)
    pos = w > 0
    out[pos] = 2.0 * np.exp(-0.5 * (w[pos] - omega0) ** 2)
    return out


def cwt(signal, plan: WaveletPlan) -> np.ndarray:
    """Continuous wavelet transform, shape (n_scales, n), complex.

    The signal is mean-removed and zero-padded to a power of two of at least
    twice its length before the frequency-domain product.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    if n < 64:
        raise ValueError("cwt needs at least 64 samples")
    if not np.isfinite(x).all():
        raise ValueError("cwt input contains NaN or Inf")
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.fft(x, nfft)
    w = 2.0 * math.pi * np.fft.fftfreq(nfft)
    psi = morlet_hat(plan.scales[:, None] * w[None, :], plan.omega0)
    return np.fft.ifft(spec[None, :] * psi, axis=-1)[:, :n]


def instantaneous_frequency(coeffs: np.ndarray, sample_rate: float) -> np.ndarray:
    """Phase-derivative frequency estimate in Hz (central difference along time)."""
    n = coeffs.shape[1]
    dphi = np.empty(coeffs.shape)
    if n >= 3:
        dphi[:, 1:-1] = np.angle(coeffs[:, 2:] * np.conj(coeffs[:, :-2])) / 2.0
    dphi[:, 0] = np.angle(coeffs[:, 1] * np.conj(coeffs[:, 0]))
    dphi[:, -1] = np.angle(coeffs[:, -1] * np.conj(coeffs[:, -2]))
    return dphi * sample_rate / (2.0 * math.pi)


def synchrosqueeze(coeffs: np.ndarray, plan: WaveletPlan) -> np.ndarray:
    """Reassign |W| to the frequency bin nearest its instantaneous frequency.

    Returns the time-major map of shape (n, plan.n_bins).
    """
    mag = np.abs(coeffs)
    n_bins = plan.n_bins
    peak = mag.max() if mag.size else 0.0
    if peak == 0.0:
        return np.zeros((coeffs.shape[1], n_bins))
    freq = instantaneous_frequency(coeffs, plan.sample_rate)
    step = (plan.fmax - plan.fmin) / (n_bins - 1)
    pos = np.rint((freq - plan.fmin) / step)
    valid = (mag > plan.gamma_rel * peak) & (pos >= 0) & (pos < n_bins)
    bins = np.where(valid, pos, -1).astype(np.int64)
    return kernels.squeeze_accumulate(mag, bins, n_bins)


# ---------------------------------------------------------------------------
# bicubic resampling


def keys_kernel(s, a: float = -0.5) -> np.ndarray:
    s = np.abs(np.asarray(s, dtype=np.float64))
    s2, s3 = s * s, s * s * s
    near = (a + 2.0) * s3 - (a + 3.0) * s2 + 1.0
    far = a * s3 - 5.0 * a * s2 + 8.0 * a * s - 4.0 * a
    return np.where(s <= 1.0, near, np.where(s < 2.0, far, 0.0))


def _stencil(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src)
    t = src - i0
    taps = i0[:, None] + np.arange(-1, 3)[None, :]
    idx = np.clip(taps, 0, n_in - 1).astype(np.int64)
    w = np.empty((n_out, 4))
    w[:, 0] = keys_kernel(1.0 + t)
    w[:, 2] = keys_kernel(1.0 - t)
    w[:, 3] = keys_kernel(2.0 - t)
    w[:, 1] = 1.0 - (w[:, 0] + w[:, 2] + w[:, 3])
    return idx, w


def bicubic_resize(image, out_h: int, out_w: int) -> np.ndarray:
    """Keys (a = -0.5) cubic resize with edge clamping; trailing channel axis resized independently."""
    img = np.asarray(image, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    if img.ndim == 3:
        return np.stack([bicubic_resize(img[..., c], out_h, out_w) for c in range(img.shape[2])], axis=-1)
    if img.ndim != 2:
        raise ValueError(f"expected HxW or HxWxC image, got shape {img.shape}")
    h, w = img.shape
    if h < 4 or w < 4:
        raise ValueError(f"image must be at least 4x4, got {h}x{w}")
    idx, wt = _stencil(h, out_h)
    rows = kernels.cubic_rows(img, idx, wt)
    idx, wt = _stencil(w, out_w)
    return np.ascontiguousarray(kernels.cubic_rows(np.ascontiguousarray(rows.T), idx, wt).T)


def resize_unclamped_mask(n_in: int, n_out: int) -> np.ndarray:
    """Output positions whose 4-tap footprint lies inside ``[0, n_in)``."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src)
    return (i0 - 1 >= 0) & (i0 + 2 <= n_in - 1)


# ---------------------------------------------------------------------------
# dataset construction


@dataclass(frozen=True)
class DatasetSpec:
    """Everything that determines the bytes of a generated dataset."""

    n_classes: int = 4
    per_class: int = 32
    sample_rate: float = 12800.0
    length: int = 1024
    rpm: float = 1050.0
    channels: int = 1
    out_shape: tuple = (32, 32)
    squeeze_bins: int = 128
    omega0: float = 6.0
    voices: int = 16
    gamma_rel: float = 1e-8
    normalize: bool = True
    snr_db: float = math.inf
    seed: int = 0

    def plan(self) -> WaveletPlan:
        return WaveletPlan.default(self.length, self.sample_rate, n_bins=self.squeeze_bins,
                                   omega0=self.omega0, voices=self.voices, gamma_rel=self.gamma_rel)

    def roster(self) -> list[SignalSpec]:
        return class_roster(self.n_classes, sample_rate=self.sample_rate, length=self.length, rpm=self.rpm)


@dataclass
class ManifestRow:
    path: str
    label: int
    class_name: str
    rpm: float
    snr_db: float
    seed: int

    def to_line(self) -> str:
        return f"{self.path}\t{self.label}\t{self.class_name}\t{self.rpm:g}\t{self.snr_db:g}\t{self.seed}"

    @classmethod
    def from_line(cls, line: str) -> "ManifestRow":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise ValueError(f"manifest line needs 6 fields, got {len(parts)}: {line!r}")
        return cls(parts[0], int(parts[1]), parts[2], float(parts[3]), float(parts[4]), int(parts[5]))


def sample_seed(master: int, class_id: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, class_id, index])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def signal_to_tfr(x: np.ndarray, plan: WaveletPlan, out_shape: Sequence[int], normalize: bool = True) -> np.ndarray:
    """(C, n) record -> (n_t, n_f, C) TFR: cwt, synchrosqueeze, resize each channel, stack."""
    x = np.atleast_2d(x)
    maps = []
    for ch in x:
        tf = synchrosqueeze(cwt(ch, plan), plan)
        maps.append(bicubic_resize(tf, out_shape[0], out_shape[1]))
    tfr = np.stack(maps, axis=-1)
    # cubic overshoot can dip below zero; magnitudes are non-negative by contract
    np.maximum(tfr, 0.0, out=tfr)
    if normalize:
        peak = tfr.max()
        if peak > 0:
            tfr /= peak
    return tfr


def synthesize_sample(spec: SignalSpec, seed: int, ds: DatasetSpec, snr_db: float | None = None) -> np.ndarray:
    """Regenerate the TFR of one sample from its seed, optionally with extra noise."""
    snr = ds.snr_db if snr_db is None else snr_db
    root = Rng(seed)
    x = generate_channels(spec, root.child(0), ds.channels)
    if not (math.isinf(snr) and snr > 0):
        noise_rng = root.child(1)
        x = np.stack([inject_noise(ch, snr, noise_rng) for ch in x])
    return signal_to_tfr(x, ds.plan(), ds.out_shape, ds.normalize)


def write_tfr(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = TFR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write sample file {path}: {exc}") from exc


def read_tfr(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read sample file {path}: {exc}") from exc
    if raw[:4] != TFR_MAGIC:
        raise TfrFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TfrFormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + 4 * rank:
        raise TfrFormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    body = raw[8 + 4 * rank:]
    if len(body) != 4 * int(np.prod(dims)):
        raise TfrFormatError(f"{path}: payload of {len(body)} bytes does not match dims {dims}")
    return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float64)


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(r.to_line() + "\n")


def read_manifest(path) -> list[ManifestRow]:
    with open(path, encoding="utf-8") as fh:
        return [ManifestRow.from_line(line) for line in fh if line.strip()]


def build_dataset(ds: DatasetSpec, out_dir, counts: Sequence[int] | None = None) -> list[ManifestRow]:
    """Generate, transform and persist every sample; writes ``manifest.tsv`` and returns its rows."""
    specs = ds.roster()
    if len(specs) < 2:
        raise ValueError("need at least two classes")
    counts = list(counts) if counts is not None else [ds.per_class] * len(specs)
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    rows = []
    for spec, count in zip(specs, counts):
        for k in range(count):
            seed = sample_seed(ds.seed, spec.class_id, k)
            tfr = synthesize_sample(spec, seed, ds)
            rel = f"samples/{spec.name}_{k:05d}.tfr"
            write_tfr(out_dir / rel, tfr)
            rows.append(ManifestRow(rel, spec.class_id, spec.name, spec.rpm, ds.snr_db, seed))
    write_manifest(out_dir / "manifest.tsv", rows)
    return rows


def load_samples(rows: Sequence[ManifestRow], root) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    x = np.stack([read_tfr(root / r.path) for r in rows]) if rows else np.zeros((0,))
    y = np.array([r.label for r in rows], dtype=np.int64)
    return x, y


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    # every requested split gets at least one member of the class
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(rows: Sequence[ManifestRow], fractions: Sequence[float], rng: Rng):
    """Stratified shuffle split; returns one row list per fraction."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    needed = sum(1 for f in fractions if f > 0)
    by_class: dict[int, list[ManifestRow]] = {}
    for r in rows:
        by_class.setdefault(r.label, []).append(r)
    parts: list[list[ManifestRow]] = [[] for _ in fractions]
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < needed:
            raise StratificationError(
                f"class {label} has {len(members)} samples but {needed} splits need one each")
        perm = rng.permutation(len(members))
        counts = _allocate(len(members), fractions)
        start = 0
        for i, c in enumerate(counts):
            parts[i].extend(members[j] for j in perm[start:start + c])
            start += c
    return tuple(parts)

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import find_peaks, hilbert

from tftdiag.signals import (CLASS_NAMES, DatasetSpec, ManifestRow, SignalSpec, SnrError, SpecError,
                             StratificationError, TfrFormatError, WaveletPlan, bicubic_resize, build_dataset,
                             class_preset, class_roster, cwt, generate_channels, generate_signal,
                             inject_noise, keys_kernel, read_manifest, read_tfr, resize_unclamped_mask,
                             signal_to_tfr, split_dataset, synchrosqueeze, write_manifest, write_tfr)
from tftdiag.tensor import Rng

FS, N = 1024.0, 1024


def interior(n):
    return slice(n // 8, n - n // 8)


# -- synthesis ------------------------------------------------------------

def test_degenerate_spec_is_a_pure_shaft_tone():
    spec = SignalSpec(class_id=0, noise_floor=0.0, shaft_hz=17.5, shaft_amplitude=0.3)
    x = generate_signal(spec, Rng(1))
    t = np.arange(spec.length) / spec.sample_rate
    basis = np.stack([np.sin(2 * np.pi * 17.5 * t), np.cos(2 * np.pi * 17.5 * t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    assert np.max(np.abs(basis @ coef - x)) <= 1e-12
    assert math.hypot(*coef) == pytest.approx(0.3, rel=1e-12)


def test_impact_count_matches_fault_rate():
    spec = SignalSpec(class_id=1, sample_rate=12800.0, length=1024, fault_hz=64.0, noise_floor=0.0,
                      shaft_amplitude=0.0)
    lo = math.floor(1024 * 64 / 12800)
    for seed in range(10):
        x = generate_signal(spec, Rng(seed))
        env = np.abs(hilbert(x))
        peaks, _ = find_peaks(env, height=0.3 * env.max(), distance=100)
        assert lo <= len(peaks) <= lo + 1, seed


def test_same_seed_same_signal_bitwise():
    spec = class_preset("IORF", 5)
    assert generate_signal(spec, Rng(7)).tobytes() == generate_signal(spec, Rng(7)).tobytes()
    assert generate_signal(spec, Rng(7)).tobytes() != generate_signal(spec, Rng(8)).tobytes()


@pytest.mark.parametrize("field,value", [("shaft_hz", 7000.0), ("fault_hz", 6400.0), ("resonance_hz", 9000.0)])
def test_nyquist_violation_is_rejected(field, value):
    spec = replace(SignalSpec(class_id=0, fault_hz=60.0), **{field: value})
    with pytest.raises(SpecError):
        generate_signal(spec, Rng(0))


def test_roster_covers_seven_conditions_with_weak_amplitude():
    roster = class_roster(7)
    assert sorted(s.name for s in roster) == sorted(CLASS_NAMES)
    by = {s.name: s for s in roster}
    for strong in ("IRF", "ORF", "IORF"):
        weak = strong[:-1] + "WF"
        assert by[weak].impact_amplitude == pytest.approx(by[strong].impact_amplitude / 4)
        assert by[weak].fault_hz == by[strong].fault_hz
    assert by["normal"].fault_hz == 0


def test_multichannel_records_share_timing():
    spec = replace(class_preset("ORF", 1), noise_floor=0.0)
    x = generate_channels(spec, Rng(3), 3)
    assert x.shape == (3, spec.length)
    envs = [np.abs(hilbert(ch)) for ch in x]
    assert np.corrcoef(envs[0], envs[1])[0, 1] > 0.9
    assert not np.allclose(x[0], x[1])


# -- noise ----------------------------------------------------------------

@pytest.mark.parametrize("snr_db,ratio", [(0.0, 1.0), (10.0, 0.1)])
def test_noise_power_follows_definition(snr_db, ratio):
    x = np.sin(np.linspace(0, 400 * np.pi, 400_000)) * 2.0
    noisy = inject_noise(x, snr_db, Rng(1))
    p_sig = np.mean(x * x)
    assert np.var(noisy - x) == pytest.approx(ratio * p_sig, rel=0.01)


def test_measured_snr_close_to_request():
    x = Rng(4).normal(shape=4096)
    x /= np.sqrt(np.mean(x * x))
    noise = inject_noise(x, 5.0, Rng(5)) - x
    measured = 10 * np.log10(np.mean(x * x) / np.mean(noise * noise))
    assert abs(measured - 5.0) <= 0.5


def test_infinite_snr_is_identity():
    x = np.arange(10.0)
    assert np.array_equal(inject_noise(x, math.inf, Rng(0)), x)


def test_zero_signal_has_no_snr():
    with pytest.raises(SnrError):
        inject_noise(np.zeros(16), 5.0, Rng(0))


# -- wavelet transform ------------------------------------------------------

def plan(n_bins=128):
    return WaveletPlan.default(N, FS, n_bins=n_bins)


def tone(f=50.0):
    return np.sin(2 * np.pi * f * np.arange(N) / FS)


def test_cwt_of_zero_is_zero():
    assert not np.any(cwt(np.zeros(N), plan()))


def test_impulse_response_peaks_at_impulse_for_every_scale():
    x = np.zeros(N)
    x[N // 2] = 1.0
    mag = np.abs(cwt(x, plan()))
    assert np.all(np.argmax(mag, axis=1) == N // 2)


def test_tone_peaks_at_expected_scale():
    p = plan()
    mag = np.abs(cwt(tone(), p))
    # analytic Morlet responds maximally at a = omega0 * fs / (2 pi f)
    freqs = p.scale_freqs
    step = np.log2(freqs[0] / freqs[1])
    best = freqs[np.argmax(mag[:, interior(N)], axis=0)]
    assert np.all(np.abs(np.log2(best / 50.0)) <= step)


def test_cwt_is_linear():
    r = Rng(2)
    x, y = r.normal(shape=N), r.normal(shape=N)
    a, b = 1.7, -0.4
    lhs = cwt(a * x + b * y, plan())
    rhs = a * cwt(x, plan()) + b * cwt(y, plan())
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


def test_squeeze_of_zero_is_zero():
    p = plan()
    out = synchrosqueeze(np.zeros((len(p.scales), N), complex), p)
    assert out.shape == (N, p.n_bins) and not out.any()


def test_tone_ridge_within_one_bin():
    p = plan()
    tf = synchrosqueeze(cwt(tone(), p), p)
    true_bin = (50.0 - p.fmin) / (p.bin_freqs[1] - p.bin_freqs[0])
    ridge = np.argmax(tf[interior(N)], axis=1)
    assert np.mean(np.abs(ridge - true_bin) <= 1.0) >= 0.95


def test_tone_energy_concentrates_near_true_bin():
    p = plan()
    tf = synchrosqueeze(cwt(tone(), p), p)
    k = int(round((50.0 - p.fmin) / (p.bin_freqs[1] - p.bin_freqs[0])))
    energy = tf ** 2
    assert energy[:, k - 2:k + 3].sum() / energy.sum() >= 0.8


def test_chirp_ridge_tracks_instantaneous_frequency():
    p = plan()
    t = np.arange(N) / FS
    x = np.cos(2 * np.pi * (20 * t + 50 * t ** 2))  # f(t) = 20 + 100 t
    tf = synchrosqueeze(cwt(x, p), p)
    step = p.bin_freqs[1] - p.bin_freqs[0]
    true_bins = (20 + 100 * t - p.fmin) / step
    err = np.abs(np.argmax(tf, axis=1) - true_bins)[interior(N)]
    assert np.median(err) <= 2.0


def test_squeeze_threshold_drops_tiny_coefficients():
    p = plan()
    w = np.zeros((len(p.scales), N), complex)
    t = np.arange(N) / FS
    w[10] = np.exp(2j * np.pi * 100.0 * t)
    w[20] = 1e-9 * np.exp(2j * np.pi * 200.0 * t)  # below 1e-8 * max
    assert synchrosqueeze(w, p).sum() == pytest.approx(N)


# -- resize ---------------------------------------------------------------

def test_keys_kernel_values():
    assert keys_kernel(0.0) == 1.0
    assert keys_kernel(1.0) == 0.0 and keys_kernel(2.0) == 0.0
    assert keys_kernel(0.5) == pytest.approx(0.5625)  # (a+2)/8 - (a+3)/4 + 1 with a=-1/2


def test_same_size_resize_is_bitwise_copy():
    img = Rng(0).normal(shape=(9, 13))
    assert bicubic_resize(img, 9, 13).tobytes() == img.tobytes()


@pytest.mark.parametrize("shape", [(32, 32), (7, 50), (100, 5)])
def test_constant_image_stays_constant(shape):
    out = bicubic_resize(np.full((20, 30), 0.3), *shape)
    assert np.all(out == 0.3)


@pytest.mark.parametrize("src,dst", [((40, 60), (17, 23)), ((16, 16), (50, 40)), ((64, 256), (32, 32))])
def test_linear_ramp_reproduced_in_interior(src, dst):
    h, w = src
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = 0.7 * r - 0.2 * c + 3.0
    out = bicubic_resize(img, *dst)
    sr = (np.arange(dst[0]) + 0.5) * h / dst[0] - 0.5
    sc = (np.arange(dst[1]) + 0.5) * w / dst[1] - 0.5
    expect = 0.7 * sr[:, None] - 0.2 * sc[None, :] + 3.0
    mask = resize_unclamped_mask(h, dst[0])[:, None] & resize_unclamped_mask(w, dst[1])[None, :]
    assert mask.any()
    assert np.max(np.abs(out - expect)[mask]) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31))
def test_resize_commutes_with_scaling(c, oh, ow, seed):
    img = Rng(seed).normal(shape=(12, 10))
    a = bicubic_resize(c * img, oh, ow)
    b = c * bicubic_resize(img, oh, ow)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12 * max(1.0, abs(c)))


def test_resize_rejects_empty_target():
    with pytest.raises(ValueError):
        bicubic_resize(np.ones((8, 8)), 0, 4)


def test_resize_handles_channels_independently():
    img = Rng(1).normal(shape=(10, 12, 3))
    out = bicubic_resize(img, 5, 6)
    assert out.shape == (5, 6, 3)
    assert np.array_equal(out[..., 1], bicubic_resize(img[..., 1], 5, 6))


# -- TFR and dataset files --------------------------------------------------

def test_tfr_is_non_negative_with_unit_peak():
    ds = DatasetSpec()
    x = generate_signal(class_preset("IRF", 1), Rng(0))
    tfr = signal_to_tfr(x, ds.plan(), (32, 32))
    assert tfr.shape == (32, 32, 1)
    assert tfr.min() >= 0 and tfr.max() == 1.0


def test_tfr_file_round_trip(tmp_path):
    arr = Rng(0).normal(shape=(4, 5, 3)).astype(np.float32)
    write_tfr(tmp_path / "a.tfr", arr)
    back = read_tfr(tmp_path / "a.tfr")
    assert back.astype(np.float32).tobytes() == arr.tobytes()
    raw = (tmp_path / "a.tfr").read_bytes()
    assert raw[:4] == b"TFR1" and len(raw) == 4 + 4 + 12 + 4 * 60


def test_tfr_file_errors(tmp_path):
    (tmp_path / "bad.tfr").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(TfrFormatError):
        read_tfr(tmp_path / "bad.tfr")
    write_tfr(tmp_path / "t.tfr", np.ones((3, 3)))
    (tmp_path / "t.tfr").write_bytes((tmp_path / "t.tfr").read_bytes()[:-2])
    with pytest.raises(TfrFormatError):
        read_tfr(tmp_path / "t.tfr")
    with pytest.raises(OSError, match="missing.tfr"):
        read_tfr(tmp_path / "missing.tfr")


def test_build_dataset_counts_and_shapes(tmp_path):
    ds = DatasetSpec(n_classes=4, per_class=8)
    rows = build_dataset(ds, tmp_path)
    assert len(rows) == 32 and len(list((tmp_path / "samples").iterdir())) == 32
    assert read_manifest(tmp_path / "manifest.tsv") == rows
    assert read_tfr(tmp_path / rows[0].path).shape == (32, 32, 1)
    assert [sum(r.label == k for r in rows) for k in range(4)] == [8] * 4


def test_three_channel_dataset(tmp_path):
    ds = DatasetSpec(n_classes=2, per_class=2, channels=3)
    rows = build_dataset(ds, tmp_path)
    assert read_tfr(tmp_path / rows[-1].path).shape == (32, 32, 3)


def test_dataset_bytes_are_reproducible(tmp_path):
    ds = DatasetSpec(n_classes=3, per_class=3, seed=11)
    build_dataset(ds, tmp_path / "a")
    build_dataset(ds, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_manifest_line_round_trip(tmp_path):
    rows = [ManifestRow("samples/x.tfr", 2, "ORF", 1050.0, math.inf, 123456789012345)]
    write_manifest(tmp_path / "m.tsv", rows)
    assert (tmp_path / "m.tsv").read_text().split("\t")[4] == "inf"
    assert read_manifest(tmp_path / "m.tsv") == rows


# -- splitting ------------------------------------------------------------

def make_rows(per_class):
    return [ManifestRow(f"{k}_{i}", k, str(k), 1050.0, math.inf, i)
            for k, n in enumerate(per_class) for i in range(n)]


def test_split_sixty_twenty_twenty():
    tr, va, te = split_dataset(make_rows([25, 25, 25, 25]), (0.6, 0.2, 0.2), Rng(0))
    assert (len(tr), len(va), len(te)) == (60, 20, 20)
    assert {r.path for r in tr + va + te} == {r.path for r in make_rows([25] * 4)}


def test_split_everything_to_train():
    tr, va, te = split_dataset(make_rows([5, 7]), (1.0, 0.0, 0.0), Rng(0))
    assert len(tr) == 12 and not va and not te


def test_split_too_small_class():
    with pytest.raises(StratificationError):
        split_dataset(make_rows([10, 2]), (0.6, 0.2, 0.2), Rng(0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(20, 80), min_size=2, max_size=7),
       st.floats(0.2, 0.8), st.floats(0.05, 0.15), st.integers(0, 1000))
def test_split_is_stratified(sizes, f_train, f_val, seed):
    fr = (f_train, f_val, 1.0 - f_train - f_val)
    parts = split_dataset(make_rows(sizes), fr, Rng(seed))
    for k, n in enumerate(sizes):
        for part, f in zip(parts, fr):
            got = sum(r.label == k for r in part)
            assert abs(got - f * n) <= 1.0 + 1e-9
    assert sum(map(len, parts)) == sum(sizes)


def test_split_is_seeded():
    rows = make_rows([20, 20])
    a = split_dataset(rows, (0.6, 0.2, 0.2), Rng(4))
    b = split_dataset(rows, (0.6, 0.2, 0.2), Rng(4))
    assert [[r.path for r in p] for p in a] == [[r.path for r in p] for p in b]


def test_nan_inputs_are_rejected():
    with pytest.raises(SnrError):
        inject_noise(np.ones(16), float("nan"), Rng(0))
    x = tone()
    x[5] = np.nan
    with pytest.raises(ValueError):
        cwt(x, plan())

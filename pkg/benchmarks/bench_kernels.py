"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row is the best of N runs after one warm-up call (the warm-up absorbs
JIT compilation). The last row times full sample synthesis end to end.
"""

import argparse
import timeit

import numpy as np

from tftdiag import kernels
from tftdiag.signals import DatasetSpec, class_preset, synthesize_sample


def cases():
    r = np.random.default_rng(0)
    n_scales, n = 96, 4096
    mag = r.random((n_scales, n))
    bins = r.integers(-1, 128, (n_scales, n))
    img = r.random((512, 512))
    idx = np.clip(np.arange(224)[:, None] * 512 // 224 + np.arange(-1, 3)[None, :], 0, 511)
    w = r.random((224, 4))
    t = np.arange(n) / 12800.0
    onsets = np.sort(r.uniform(0, t[-1], 40))
    amps = r.uniform(0.5, 1.5, 40)
    spec = DatasetSpec()
    preset = class_preset("IORF", 3)
    return {
        "squeeze_accumulate 96x4096": lambda: kernels.squeeze_accumulate(mag, bins, 128),
        "cubic_rows 512x512 -> 224": lambda: kernels.cubic_rows(img, idx, w),
        "impact_train 4096 x 40 hits": lambda: kernels.impact_train(t, onsets, amps, 600.0, 3000.0, 0.3),
        "synthesize_sample (desk)": lambda: synthesize_sample(preset, 1234, spec),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if kernels.numba_available else [])
    saved = kernels.backend()
    results = {}
    try:
        for name in backends:
            kernels.set_backend(name)
            for label, fn in cases().items():
                fn()
                results[label, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    finally:
        kernels.set_backend(saved)

    print(f"{'case':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label in cases():
        a = results[label, "numpy"] * 1e3
        if "numba" in backends:
            b = results[label, "numba"] * 1e3
            print(f"{label:32s} {a:10.3f} {b:10.3f} {a / b:7.1f}x")
        else:
            print(f"{label:32s} {a:10.3f} {'n/a':>10s} {'':>8s}")


if __name__ == "__main__":
    main()

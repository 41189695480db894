"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 64] [--json out.json]

Both implementations are imported side by side from ``onestep_face.kernels``;
the first numba call (compilation, or loading from the on-disk cache) is done
before timing starts. Each row also checks that the two backends agree.
"""
import argparse
import json
import platform
import timeit

import numpy as np

from onestep_face import _accel
from onestep_face import kernels as K
from onestep_face.degradation import BASE_QTABLE


def cases(size, rng):
    img = rng.random((size, size, 3))
    feats, codes = rng.standard_normal((256, 64)), rng.standard_normal((256, 64))
    g = K.gaussian_kernel1d(1.5)
    ylo, yhi, yf = K._resize_axis(size, size // 4)
    xlo, xhi, xf = K._resize_axis(size, size // 4)
    plane = np.ascontiguousarray(img[:, :, 0] * 255.0)
    q = np.ascontiguousarray(BASE_QTABLE, dtype=np.float64)
    return {
        "nearest_code 256x256x64": (K._nearest_code_nb, K._nearest_code_np, (feats, codes)),
        f"correlate2d {size}x{size}x3, 1x{g.size}": (K._correlate2d_nb, K._correlate2d_np, (img, g[None, :].copy())),
        f"resize {size}->{size // 4}": (K._resize_nb, K._resize_np, (img, ylo, yhi, yf, xlo, xhi, xf)),
        f"dct roundtrip {size}x{size}": (K._dct_roundtrip_nb, K._dct_roundtrip_np, (plane, q, K._BASIS)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--json")
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    for name, (nb, npf, a) in cases(args.size, rng).items():
        ref, got = npf(*a), nb(*a)
        agree = bool(np.allclose(ref, got, rtol=1e-10, atol=1e-9))
        times = {}
        for label, fn in (("numba", nb), ("numpy", npf)):
            t = timeit.Timer(lambda fn=fn: fn(*a))
            n, _ = t.autorange()
            times[label] = min(t.repeat(args.repeat, n)) / n * 1e3
        speedup = times["numpy"] / times["numba"]
        rows.append({"kernel": name, "numba_ms": times["numba"], "numpy_ms": times["numpy"],
                     "speedup": speedup, "agree": agree})
        print(f"{name:34s} {times['numba']:10.3f} {times['numpy']:10.3f} {speedup:7.1f}x  {agree}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"machine": platform.machine(), "python": platform.python_version(), "rows": rows}, f, indent=1)


if __name__ == "__main__":
    main()

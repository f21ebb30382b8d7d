"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 5]

Both backends are importable side by side, so one process times both;
numba compile time is excluded by a warm-up call. Outputs are compared
before timing so a fast-but-wrong kernel cannot report a speedup.
"""
import argparse
import time

import numpy as np

from lactlab import kernels, tomo


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size):
    rng = np.random.default_rng(0)
    img = tomo.shepp_logan(size).astype(np.float64)
    ang = np.deg2rad(np.asarray(tomo.make_angle_list(tomo.AngleSpec(120)), dtype=np.float64))
    t, dt = kernels.ray_samples(size)
    det = np.arange(size) - (size - 1) / 2.0
    sino = kernels.radon_numpy(img, ang, det, t, dt)
    w = np.full(len(ang), np.deg2rad(0.5))
    x = rng.normal(size=(8, 16, size, size)).astype(np.float32)
    cols = kernels.im2col_numpy(x, 3, 3, 1, 1)
    return {
        "radon": (lambda: kernels.radon_numpy(img, ang, det, t, dt),
                  lambda: kernels.radon_numba(img, ang, det, t, dt)),
        "backproject": (lambda: kernels.backproject_numpy(sino, ang, w, size),
                        lambda: kernels.backproject_numba(sino, ang, w, size)),
        "im2col 3x3": (lambda: kernels.im2col_numpy(x, 3, 3, 1, 1),
                       lambda: kernels.im2col_numba(x, 3, 3, 1, 1)),
        "col2im 3x3": (lambda: kernels.col2im_numpy(cols, size, size, 1, 1),
                       lambda: kernels.col2im_numba(cols, size, size, 1, 1)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (f_np, f_nb) in cases(args.size).items():
        np.testing.assert_allclose(f_np(), f_nb(), rtol=1e-5, atol=1e-5)
        a, b = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:<14}{a * 1e3:>10.2f}{b * 1e3:>10.2f}{a / b:>8.1f}x")


if __name__ == "__main__":
    main()

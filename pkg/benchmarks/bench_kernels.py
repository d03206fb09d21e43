"""Benchmark the compiled compositing kernels against the numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--sizes 16,32,64] [--repeats 5]
"""

import argparse
import time

import numpy as np

from splatstream import _kernels_py

try:
    from splatstream import _composite
except ImportError:
    _composite = None


def make_inputs(rng, n, side):
    means2d = rng.uniform(0, side, (n, 2))
    conics = np.zeros((n, 3))
    conics[:, 0] = rng.uniform(0.02, 0.2, n)
    conics[:, 2] = rng.uniform(0.02, 0.2, n)
    alphas = rng.uniform(0.3, 0.95, n)
    colors = rng.uniform(0, 1, (n, 3))
    radius = 3.5 / np.sqrt(np.minimum(conics[:, 0], conics[:, 2]))
    x0 = np.clip(np.floor(means2d[:, 0] - radius), 0, side).astype(np.int64)
    x1 = np.clip(np.ceil(means2d[:, 0] + radius) + 1, 0, side).astype(np.int64)
    y0 = np.clip(np.floor(means2d[:, 1] - radius), 0, side).astype(np.int64)
    y1 = np.clip(np.ceil(means2d[:, 1] + radius) + 1, 0, side).astype(np.int64)
    bboxes = np.stack([x0, x1, y0, y1], axis=1)
    return means2d, conics, alphas, colors, bboxes


def bench(module, args_fwd, d_image, repeats):
    t_fwd = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = module.forward(*args_fwd, True)
        t_fwd.append(time.perf_counter() - t0)
    means2d, conics, alphas, colors, bboxes, h, w = args_fwd
    t_bwd = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        module.backward(means2d, conics, alphas, colors, bboxes, h, w, out[3], out[1], d_image)
        t_bwd.append(time.perf_counter() - t0)
    return min(t_fwd), min(t_bwd), out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="16,32,64", help="comma-separated image sides")
    parser.add_argument("--count", type=int, default=64, help="primitives per frame")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    sides = [int(s) for s in args.sizes.split(",")]
    print(f"{'side':>6} {'numpy fwd':>11} {'numpy bwd':>11} {'cython fwd':>11} "
          f"{'cython bwd':>11} {'speedup':>8}")
    for side in sides:
        inputs = make_inputs(rng, args.count, side)
        args_fwd = (*inputs, side, side)
        d_image = rng.normal(size=(side, side, 3))
        py_f, py_b, out_py = bench(_kernels_py, args_fwd, d_image, args.repeats)
        if _composite is None:
            print(f"{side:>6} {py_f * 1e3:>9.2f}ms {py_b * 1e3:>9.2f}ms "
                  f"{'n/a':>11} {'n/a':>11} {'n/a':>8}")
            continue
        cy_f, cy_b, out_cy = bench(_composite, args_fwd, d_image, args.repeats)
        err = float(np.max(np.abs(out_py[0] - out_cy[0])))
        speed = (py_f + py_b) / (cy_f + cy_b)
        print(f"{side:>6} {py_f * 1e3:>9.2f}ms {py_b * 1e3:>9.2f}ms {cy_f * 1e3:>9.2f}ms "
              f"{cy_b * 1e3:>9.2f}ms {speed:>7.1f}x   (max img diff {err:.1e})")


if __name__ == "__main__":
    main()

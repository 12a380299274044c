"""Time the numba kernels against their numpy twins, then a full refinement under each backend.

    python3 benchmarks/bench_kernels.py [--size 64] [--batch 8] [--repeat 20]

The per-kernel table calls ``<name>_nb`` and ``<name>_np`` directly.  The
end-to-end rows run ``refine`` in a subprocess with ``RNCA_BACKEND`` set,
because the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rnca import _accel
from rnca.morph import SQUARE1


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(size, batch, rng):
    k = 16
    S = (rng.random((batch, size, size, k)) * (rng.random((batch, size, size, 1)) < 0.4)).astype(np.float32)
    pre = _accel.nbmax3_np(S[..., 0]) >= 0.1
    flat = np.flatnonzero(pre)
    delta = rng.normal(0, 0.1, (flat.size, k)).astype(np.float32)
    rows = rng.normal(0, 1, (flat.size, 9 * k)).astype(np.float32)
    mask = rng.random((size * 2, size * 2)) < 0.5
    off = SQUARE1.offsets()
    pts = np.argwhere(mask[:size, :size]).astype(np.float64)
    return {
        "nbmax3": (S[..., 0].copy(),),
        "gather_patches": (S, flat),
        "scatter_patches": (rows, flat, np.zeros_like(S)),
        "apply_update": (S, flat, delta, pre, 0.1),
        "erode": (mask, off),
        "dilate": (mask, off),
        "label": (mask, 8),
        "zhang_suen": (mask,),
        "nearest_distances": (pts[::2], pts[1::2]),
    }


END_TO_END = """
import time, numpy as np
from rnca.data import ShapeSpec, gen_shape
from rnca.nca import ModelConfig, init_params, refine
image, gt = gen_shape(ShapeSpec(kind="ring", size={size}, seed=0))
params = init_params(ModelConfig(), np.random.default_rng(0))
params.mlp2_w[...] = np.random.default_rng(1).normal(0, 0.02, params.mlp2_w.shape)
refine(gt, image, params, 4, rng=0)
t = time.perf_counter()
refine(gt, image, params, 64, rng=0)
print(time.perf_counter() - t)
"""


def end_to_end(backend, size):
    env = dict(os.environ, RNCA_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(size=size)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    cases = kernel_cases(args.size, args.batch, np.random.default_rng(0))
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name in _accel.KERNELS:
        a = cases[name]
        t_np = best_of(lambda: getattr(_accel, name + "_np")(*a), args.repeat)
        t_nb = best_of(lambda: getattr(_accel, name + "_nb")(*a), args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")

    t_np = end_to_end("numpy", args.size)
    t_nb = end_to_end("numba", args.size)
    print(f"\nrefine 64 steps, {args.size}x{args.size}: numpy {t_np:.3f}s  numba {t_nb:.3f}s  "
          f"({t_np / t_nb:.1f}x)")


if __name__ == "__main__":
    main()

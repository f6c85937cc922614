"""Compare the numba and numpy im2col/col2im paths, then whole training steps.

Run: python3 benchmarks/bench_kernels.py [--steps 20]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from qgan import _kernels

# (N, C, H, W, k, stride, pad): the generator/discriminator shapes at the default 32x32 topology
SHAPES = [
    (16, 3, 32, 32, 4, 2, 1),
    (16, 24, 16, 16, 4, 2, 1),
    (16, 48, 8, 8, 4, 2, 1),
    (16, 96, 4, 4, 4, 2, 1),
]


def best_of(fn, repeat=7):
    fn()  # warm up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernels():
    print(f"{'shape':<28}{'op':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    rng = np.random.default_rng(0)
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.normal(size=(n, c, h, w))
        cols = _kernels.im2col_numpy(x, k, k, s, p)
        pairs = {
            "im2col": (lambda: _kernels.im2col_numpy(x, k, k, s, p), lambda: _kernels.im2col_numba(x, k, k, s, p)),
            "col2im": (lambda: _kernels.col2im_numpy(cols, x.shape, k, k, s, p),
                       lambda: _kernels.col2im_numba(cols, x.shape, k, k, s, p)),
        }
        for op, (f_np, f_nb) in pairs.items():
            t_np = best_of(f_np)
            t_nb = best_of(f_nb)
            label = f"{n}x{c}x{h}x{w} k{k}s{s}p{p}"
            print(f"{label:<28}{op:<8}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")


STEP_SNIPPET = """
import time, numpy as np
from qgan import BACKEND
from qgan.dataio import SyntheticSpec, synth_dataset
from qgan.gan import QGAN, TrainConfig, train_step
data = synth_dataset(SyntheticSpec(side=32, count=16))
model = QGAN.create(TrainConfig())
train_step(model, data)
t = time.perf_counter()
for _ in range({steps}):
    train_step(model, data)
print(BACKEND, (time.perf_counter() - t) / {steps})
"""


def bench_steps(steps):
    print(f"\nfull train_step at the default topology, batch 16, mean of {steps}")
    for flag in ("0", "1"):
        env = dict(os.environ, QGAN_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  backend {out[0]:<6} {float(out[1]) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels()
    bench_steps(args.steps)

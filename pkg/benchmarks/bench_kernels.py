"""Time the numba kernels against their numpy twins, and one training step on each backend.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from colf import kernels
from colf.scene import make_scene, tri_sphere
from colf.trainer import TrainConfig, Trainer


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def cases(rng):
    grid = rng.standard_normal((32, 32, 32))
    xy = rng.uniform(-1, 32, size=(12288, 2))
    g = rng.standard_normal((12288, 32))
    idx = rng.integers(0, 1000, 20000)
    vals = rng.standard_normal((20000, 8))
    x = rng.standard_normal((3, 4096, 16))
    stack = rng.standard_normal((3, 4096, 16))
    return {
        "bilinear_gather": lambda: kernels.bilinear_gather(grid, xy),
        "bilinear_scatter": lambda: kernels.bilinear_scatter(g, xy, 32, 32),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(idx, vals, 1000),
        "elu_with_grad": lambda: kernels.elu_with_grad(x),
        "sorted_sum0": lambda: kernels.sorted_sum0(stack),
        "loo_sorted_sum0": lambda: kernels.loo_sorted_sum0(stack),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=5, help="training steps timed per backend")
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases(rng).items():
        with kernels.backend(False):
            t_np = best_of(fn, args.repeat)
        with kernels.backend(True):
            t_nb = best_of(fn, args.repeat)
        print(f"{name:<20} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")

    ds = make_scene(tri_sphere(), 6, size=64, n_source=3, n_samples=64)
    cfg = TrainConfig(d=8, width=16, n_coarse=16, n_fine=16, eval_every=0)
    for use in (False, True):
        with kernels.backend(use):
            tr = Trainer(cfg, [ds])
            ms = best_of(tr.train_step, args.steps)
        print(f"{'train_step (' + ('numba' if use else 'numpy') + ')':<20} {ms:10.1f} ms")


if __name__ == "__main__":
    main()

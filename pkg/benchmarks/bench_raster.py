"""Compare the compiled and numpy compositing kernels.

    python benchmarks/bench_raster.py [--size 128] [--gaussians 2000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from gsfocus import _backend
from gsfocus.core import Camera, GaussianCloud, logit
from gsfocus.rasterizer import render, render_backward


def scene(n, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(rng.uniform(-1, 1, (n, 3)), np.log(rng.uniform(0.01, 0.08, (n, 3))), q,
                         logit(rng.uniform(0.2, 0.9, n)), rng.uniform(0, 1, (n, 3)))


def bench(backend, cloud, cam, repeat):
    d = np.random.default_rng(1).normal(size=(cam.height, cam.width, 3))
    fwd, bwd = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        img, aux = render(cloud, cam, backend=backend)
        t1 = time.perf_counter()
        render_backward(cloud, cam, aux, d, backend=backend)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return img, min(fwd), min(bwd)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--gaussians", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cloud = scene(args.gaussians)
    cam = Camera.look_at(1, (0, -3.5, 0.5), (0, 0, 0), args.size, args.size, 50.0)
    results = {}
    for name in _backend.available():
        img, f, b = bench(name, cloud, cam, args.repeat)
        results[name] = img
        print(f"{name:>7}: forward {f * 1e3:8.2f} ms   backward {b * 1e3:8.2f} ms")
    if len(results) == 2:
        diff = np.max(np.abs(results["cython"] - results["python"]))
        print(f"max image difference between backends: {diff:.2e}")


if __name__ == "__main__":
    main()

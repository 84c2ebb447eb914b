#!/usr/bin/env python3
"""Numba kernels vs the pure-numpy fallback, timed side by side.

Run directly:  python benchmarks/bench_kernels.py
The numpy fallback is the same code path selected by MVSCENE_NUMBA=0.
"""

import time

import numpy as np

from mvscene import kernels

rng = np.random.default_rng(0)


def timeit(fn, repeat=5):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def row(name, jit_fn, np_fn, check=None):
    if kernels.NUMBA_ENABLED:
        jit_fn()  # compile outside the timing
        t_jit = timeit(jit_fn)
    else:
        t_jit = float("nan")
    t_np = timeit(np_fn)
    if check is not None and kernels.NUMBA_ENABLED:
        assert check(), f"{name}: paths disagree"
    speed = t_np / t_jit if t_jit == t_jit else float("nan")
    print(f"{name:<28} {t_np * 1e3:>10.1f} ms {t_jit * 1e3:>10.1f} ms {speed:>7.1f}x")


def main():
    print(f"numba enabled: {kernels.NUMBA_ENABLED}")
    print(f"{'kernel':<28} {'numpy':>13} {'numba':>13} {'speedup':>8}")

    pts = rng.random((30000, 3))
    row("fps (30k -> 2048)",
        lambda: kernels._fps_jit(pts, 2048, 0),
        lambda: kernels._fps_np(pts, 2048, 0),
        lambda: np.array_equal(kernels._fps_jit(pts, 256, 0),
                               kernels._fps_np(pts, 256, 0)))

    src = rng.random((20000, 3))
    dst = rng.random((20000, 3))
    row("1-nn map (20k vs 20k)",
        lambda: kernels._nn_jit(src, dst),
        lambda: kernels._nn_np(src, dst),
        lambda: np.array_equal(kernels._nn_jit(src, dst[:500]),
                               kernels._nn_np(src, dst[:500])))

    us = rng.uniform(0, 63, 40000)
    vs = rng.uniform(0, 63, 40000)
    zs = rng.uniform(0.5, 2.0, 40000)
    row("z-buffer splat (40k, 64x64)",
        lambda: kernels._splat_jit(us, vs, zs, 64, 64, 1),
        lambda: kernels._splat_np(us, vs, zs, 64, 64, 1),
        lambda: np.array_equal(kernels._splat_jit(us, vs, zs, 64, 64, 1)[1],
                               kernels._splat_np(us, vs, zs, 64, 64, 1)[1]))

    boxes = np.concatenate([
        rng.uniform(0, 0.8, size=(14, 1, 3)),
        rng.uniform(0.9, 1.4, size=(14, 1, 3))], axis=1)
    origin = np.array([0.6, 0.6, 2.5])
    axes = np.eye(3)
    row("raycast (64x64, 14 boxes)",
        lambda: kernels._raycast_jit(origin, axes, 46.0, 46.0, 31.5, 31.5, 64, 64, boxes),
        lambda: kernels._raycast_np(origin, axes, 46.0, 46.0, 31.5, 31.5, 64, 64, boxes),
        lambda: np.array_equal(
            kernels._raycast_jit(origin, axes, 46.0, 46.0, 31.5, 31.5, 64, 64, boxes)[1],
            kernels._raycast_np(origin, axes, 46.0, 46.0, 31.5, 31.5, 64, 64, boxes)[1]))

    q = rng.random((40000, 3)) * 2
    depth = rng.uniform(0.5, 2.0, size=(64, 64))
    row("visibility scan (40k)",
        lambda: kernels._vis_jit(q, np.eye(3), np.zeros(3), 46.0, 46.0,
                                 31.5, 31.5, 64, 64, depth, 0.02),
        lambda: kernels._vis_np(q, np.eye(3), np.zeros(3), 46.0, 46.0,
                                31.5, 31.5, 64, 64, depth, 0.02))

    cloud = rng.random((15000, 3))
    row("radius neighbors (15k, eps .05)",
        lambda: kernels._grid_neighbors_jit(cloud, 0.05),
        lambda: kernels._radius_neighbors_np(cloud, 0.05))

    ip, ix = kernels.radius_neighbors(cloud, 0.05)
    row("dbscan expand (15k)",
        lambda: kernels._dbscan_expand_jit(ip, ix, 10, cloud.shape[0]),
        lambda: kernels._dbscan_expand_py(ip, ix, 10, cloud.shape[0]),
        lambda: np.array_equal(kernels._dbscan_expand_jit(ip, ix, 10, cloud.shape[0]),
                               kernels._dbscan_expand_py(ip, ix, 10, cloud.shape[0])))


if __name__ == "__main__":
    main()

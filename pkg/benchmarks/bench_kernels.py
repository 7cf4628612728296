"""Times the numba kernel path against the pure-numpy reference path.

Run as a script. The numpy reference functions are always importable, so
one process can compare both paths; if numba is unavailable (or disabled
via MESHTRACK_NUMBA=0) only the numpy column is reported.

    python3 benchmarks/bench_kernels.py --vertices 20000 --repeats 7
"""

import argparse
import time

import numpy as np

from meshtrack import kernels


def _median_time(fn, args, repeats):
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best.append(time.perf_counter() - t0)
    return float(np.median(best))


def make_inputs(n_vertices, seed=0):
    rng = np.random.default_rng(seed)
    vertices = rng.standard_normal((n_vertices, 3))
    # quad-strip style triangulation over consecutive index triples
    tri = np.array(
        [[i, i + 1, i + 2] for i in range(n_vertices - 2)], dtype=np.int64
    )
    edges = np.unique(
        np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [0, 2]]]), axis=1),
        axis=0,
    )
    field = rng.standard_normal((4 * n_vertices, 3))
    targets = rng.standard_normal((n_vertices, 3))
    weights = (rng.random(n_vertices) > 0.1).astype(np.float64)
    return vertices, tri, edges, field, targets, weights


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--vertices", type=int, default=20000)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    vertices, tri, edges, field, targets, weights = make_inputs(args.vertices)

    cases = [
        ("accumulate_face_normals", (vertices, tri)),
        ("affine_transform_vertices", (field, vertices)),
        ("stiffness_energy", (field, edges, 1.0)),
        ("weighted_sq_error", (vertices, targets, weights)),
    ]

    print(f"n_vertices={args.vertices} triangles={len(tri)} edges={len(edges)} "
          f"repeats={args.repeats} numba={kernels.NUMBA_ENABLED}")
    header = f"{'kernel':<28} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, call_args in cases:
        ref = getattr(kernels, name + "_numpy")
        t_np = _median_time(ref, call_args, args.repeats)
        if kernels.NUMBA_ENABLED:
            fast = getattr(kernels, name + "_numba")
            fast(*call_args)  # warm the JIT cache before timing
            t_nb = _median_time(fast, call_args, args.repeats)
            print(f"{name:<28} {1e3 * t_np:>12.3f} {1e3 * t_nb:>12.3f} "
                  f"{t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<28} {1e3 * t_np:>12.3f} {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from pillarcoral import kernels


def rows(rng, n, spread):
    return np.column_stack([
        rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
        rng.uniform(0.5, 4.5, n), rng.uniform(0.5, 2.0, n), rng.uniform(-np.pi, np.pi, n),
    ])


def cases(rng):
    a, b = rows(rng, 200, 20.0), rows(rng, 64, 20.0)
    dets = rows(rng, 500, 10.0)
    order = np.argsort(-rng.uniform(size=len(dets))).astype(np.int64)
    counts = rng.integers(1, 40, size=2000)
    starts = np.r_[0, np.cumsum(counts)[:-1]].astype(np.int64)
    x = rng.normal(size=(int(counts.sum()), 16))
    return {
        "bev_iou_matrix 200x64": lambda be: be.bev_iou_matrix(a, b),
        "nms_bev 500 boxes": lambda be: be.nms_bev(dets, order, 0.5),
        "segment_max 2000 pillars x16": lambda be: be.segment_max(x, starts),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        print("compiled extension not available; only the Python backend will be timed")
    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("cython", kernels.compiled_backend))

    print(f"{'kernel':<30} {'backend':<8} {'best ms':>10} {'speedup':>8}")
    for name, fn in cases(np.random.default_rng(0)).items():
        base = None
        for label, be in backends:
            number = 1 if label == "python" else 10
            best = min(timeit.repeat(lambda: fn(be), number=number, repeat=args.repeat)) / number
            base = base or best
            print(f"{name:<30} {label:<8} {best * 1e3:10.3f} {base / best:7.1f}x")


if __name__ == "__main__":
    main()

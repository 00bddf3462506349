"""Time the compiled kernels against their pure-Python fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel runs on the input sizes the pipeline actually sees (a 224 x 224
mammogram, a 7 x 7 feature grid, a 2000-sample AUC). Outputs are also checked
for equality so a speedup never hides a divergence.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from cgn import _kernels_py

try:
    from cgn import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    img = rng.integers(0, 256, (224, 224)).astype(np.uint8)
    blobs = rng.random((224, 224)) < 0.55
    raw = rng.integers(0, 256, (300, 260)).astype(np.uint8)
    scores = rng.integers(0, 500, 2000) / 500.0
    labels = rng.integers(0, 2, 2000).astype(np.int64)
    a = rng.normal(size=(49, 16))
    b = rng.normal(size=(49, 16))
    return {
        "label4 224x224": ("label4", (blobs,)),
        "histogram256 224x224": ("histogram256", (img,)),
        "bilinear_resize 300x260->224": ("bilinear_resize", (raw, 224, 224)),
        "auc_midrank n=2000": ("auc_midrank", (scores, labels)),
        "chamfer_min_sq 49x16": ("chamfer_min_sq", (a, b)),
    }


def _same(x, y):
    if isinstance(x, tuple):
        return all(_same(p, q) for p, q in zip(x, y))
    return np.array_equal(np.asarray(x), np.asarray(y))


def bench(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, (fn, args) in cases(rng).items():
        py = getattr(_kernels_py, fn)
        t_py = min(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))
        row = {"kernel": name, "python_ms": t_py * 1e3, "compiled_ms": None, "speedup": None, "equal": None}
        if _kernels is not None:
            cy = getattr(_kernels, fn)
            t_cy = min(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat))
            row.update(compiled_ms=t_cy * 1e3, speedup=t_py / t_cy, equal=_same(py(*args), cy(*args)))
        rows.append(row)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the rows to this file")
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; timing the Python fallback only", file=sys.stderr)
    rows = bench(args.repeat)
    print(f"{'kernel':32s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  equal")
    for r in rows:
        cy = "-" if r["compiled_ms"] is None else f"{r['compiled_ms']:.3f}"
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        print(f"{r['kernel']:32s} {r['python_ms']:10.3f} {cy:>12s} {sp:>8s}  {r['equal']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["equal"] is not False for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())

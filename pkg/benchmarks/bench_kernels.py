"""Time the numba and pure-numpy kernel paths side by side and check they agree.

    python benchmarks/bench_kernels.py [--quick] [--json out.json]

Each kernel is run once per backend to warm up (numba compiles on first
call), then timed as the best of a few repeats.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from gcp import kernels
from gcp._backend import HAVE_NUMBA, use_backend
from gcp.bench import _timing_instance
from gcp.counterfactual import parent_set
from gcp.data import annotations_to_arrays


def _best(fn, repeats: int) -> tuple[float, object]:
    out = fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    same = (a == b) | (np.isnan(a) & np.isnan(b))  # equal infinities count as agreement
    with np.errstate(invalid="ignore"):
        return float(np.max(np.where(same, 0.0, np.abs(a - b)))) if a.size else 0.0


def cases(quick: bool):
    n = 200 if quick else 800
    model, data = _timing_instance(8, n, seed=0)
    g = model.graph
    X, truth = annotations_to_arrays(g, data)
    nodes = list(g.non_root_ids)
    pa = [parent_set(g, v) for v in nodes]
    pai = [s | {v} for s, v in zip(pa, nodes)]
    yield f"counterfactual_losses N={n} |V|=8", lambda: kernels.counterfactual_losses(model, X, truth, nodes, pa, pai)

    rng = np.random.default_rng(1)
    m = 400 if quick else 1500
    pts = rng.standard_normal((m, 6))
    D = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    yield f"kmedoids n={m} k=30", lambda: kernels.kmedoids(D, 30, 20)

    P = rng.dirichlet(np.ones(3), size=(m, 4)).reshape(m, 12)
    Q = rng.dirichlet(np.ones(3), size=(50, 4)).reshape(50, 12)
    ptr = np.arange(0, 13, 3)
    w = np.full(4, 0.25)
    yield f"farthest_first_kl n={m} k=30", lambda: kernels.farthest_first_kl(P, Q, ptr, w, 30)
    yield f"farthest_first_matrix n={m} k=30", lambda: kernels.farthest_first_matrix(D, k=30)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1
    rows = []
    print(f"{'kernel':40s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases(args.quick):
        with use_backend("numba"):
            t_nb, out_nb = _best(fn, args.repeats)
        with use_backend("numpy"):
            t_np, out_np = _best(fn, args.repeats)
        diff = _max_diff(out_nb, out_np)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb, "max_abs_diff": diff})
        print(f"{name:40s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f} {diff:11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

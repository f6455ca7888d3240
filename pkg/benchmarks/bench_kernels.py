"""Benchmark the numba kernels against their pure-numpy fallbacks, plus an
end-to-end meta-step comparison of the two lanes.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats 200]

The kernel table times both implementations in-process. The end-to-end
section re-runs this script's meta-step loop in a subprocess with
SIGNMAML_PURE_NUMPY=1 so the numpy lane is selected at import time, then
compares against the current lane.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from signmaml import kernels


def bench(fn, args, repeats):
    fn(*args)  # warm-up (JIT compile on the numba lane)
    best = float("inf")
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        best = min(best, (time.perf_counter() - start) / repeats)
    return best


def kernel_table(repeats):
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((100, 10))
    labels = rng.integers(0, 10, size=100).astype(np.int64)
    acts = rng.standard_normal((100, 256))
    flat = rng.standard_normal(50_000)
    grad = rng.standard_normal(50_000)
    cases = [
        ("relu_fwd", (acts,)),
        ("relu_mask", (acts,)),
        ("sign_fwd", (flat,)),
        ("softmax_fwd", (logits,)),
        ("xent_fwd", (logits, labels)),
        ("sgd_step", (flat, grad, 0.01)),
        ("sign_step", (flat, grad, 0.01)),
    ]
    print(f"{'kernel':<12} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, args in cases:
        t_np = bench(kernels.NUMPY_IMPLS[name], args, repeats)
        if kernels.NUMBA_IMPLS is None:
            print(f"{name:<12} {t_np*1e6:>10.1f}us {'n/a':>12} {'':>9}")
            continue
        t_nb = bench(kernels.NUMBA_IMPLS[name], args, repeats)
        print(f"{name:<12} {t_np*1e6:>10.1f}us {t_nb*1e6:>10.1f}us {t_np/t_nb:>8.2f}x")


def meta_step_seconds(iters=60):
    from signmaml.harness import ExperimentConfig, time_stats, train

    cfg = ExperimentConfig(
        task_kind="gaussian-blobs", input_dim=100, n_way=5, k_shot=5, n_query=15,
        separation=3.0, noise=1.0, hidden=(180, 180), method="sign-maml", beta=0.002,
        m_train=1, meta_iters=iters, test_tasks=0, seed=3,
    )
    result = train(cfg, write=False)
    return time_stats(result.records, 10)[0]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--end-to-end", action="store_true", default=True)
    parser.add_argument("--print-meta-step", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.print_meta_step:
        print(repr(meta_step_seconds()))
        return

    print(f"active lane: {kernels.BACKEND}\n")
    kernel_table(args.repeats)

    print("\nend-to-end sign-maml meta-step (51665-param MLP, P=4, m=1):")
    here = time.perf_counter()
    current = meta_step_seconds()
    print(f"  {kernels.BACKEND:<6} lane: {current*1e3:8.2f} ms/iter  (measured in {time.perf_counter()-here:.0f}s)")
    if kernels.BACKEND == "numba":
        env = dict(os.environ, SIGNMAML_PURE_NUMPY="1")
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--print-meta-step"],
            capture_output=True, text=True, env=env, check=True,
        )
        other = float(out.stdout.strip().splitlines()[-1])
        print(f"  numpy  lane: {other*1e3:8.2f} ms/iter  (subprocess with SIGNMAML_PURE_NUMPY=1)")
        print(f"  numba/numpy ratio: {current/other:.3f}")


if __name__ == "__main__":
    main()

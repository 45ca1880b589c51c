"""Timing comparison of the two kernel backends.

Runs every hot kernel on representative shapes under both the pure-numpy
reference implementation and the compiled backend (when importable), checks
that the two agree numerically, and prints a speedup table. Invoke with:

    python3 benchmarks/bench_kernels.py [--repeats N] [--small]
"""

import argparse
import time

import numpy as np

from kslab.kernels import numpy_impl

try:
    from kslab.kernels import numba_impl
except ImportError:
    numba_impl = None


def _timer(fn, args, repeats):
    fn(*args)  # warmup (and JIT compile for the numba backend)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def build_cases(small):
    rng = np.random.default_rng(0)
    t, h, w = (8, 32, 32) if small else (25, 176, 132)
    n, c = (2, 8) if small else (4, 8)
    seq = rng.standard_normal((t, h, w))
    feat = rng.standard_normal((n, c, h, w))
    pooled, idx = numpy_impl.maxpool2_fwd(feat)
    gout_pool = rng.standard_normal(pooled.shape)
    up = numpy_impl.upsample2_fwd(pooled)
    cases = [
        ("temporal_energy", (seq,)),
        ("temporal_energy_grad", (seq,)),
        ("tv_smooth_energy", (seq, 1e-6)),
        ("tv_smooth_energy_grad", (seq, 1e-6)),
        ("tv_aniso", (seq[0],)),
        ("maxpool2_fwd", (feat,)),
        ("maxpool2_bwd", (gout_pool, idx)),
        ("upsample2_fwd", (pooled,)),
        ("upsample2_bwd", (np.ascontiguousarray(up),)),
    ]
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20, help="timed repetitions per kernel")
    parser.add_argument("--small", action="store_true", help="use tiny shapes (quick check)")
    args = parser.parse_args()

    cases = build_cases(args.small)
    if numba_impl is None:
        print("compiled backend unavailable; timing the numpy backend only")

    header = "%-22s %-18s %12s %12s %9s %11s" % (
        "kernel", "shape", "numpy (ms)", "numba (ms)", "speedup", "max diff"
    )
    print(header)
    print("-" * len(header))
    for name, call_args in cases:
        ref_fn = getattr(numpy_impl, name)
        t_ref = _timer(ref_fn, call_args, args.repeats)
        shape = "x".join(str(s) for s in np.asarray(call_args[0]).shape)
        if numba_impl is None:
            print("%-22s %-18s %12.3f %12s %9s %11s" % (name, shape, t_ref * 1e3, "-", "-", "-"))
            continue
        fast_fn = getattr(numba_impl, name)
        t_fast = _timer(fast_fn, call_args, args.repeats)
        diff = _max_diff(ref_fn(*call_args), fast_fn(*call_args))
        print(
            "%-22s %-18s %12.3f %12.3f %8.1fx %11.2e"
            % (name, shape, t_ref * 1e3, t_fast * 1e3, t_ref / t_fast, diff)
        )


if __name__ == "__main__":
    main()

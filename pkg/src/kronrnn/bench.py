"""Wall-clock comparison of dense vs Kronecker-factored matrix application.

Dense application of an (N x N) operator to an (M x N) batch costs
O(M N^2); with all-2x2 factors the factored kernel costs O(M N log N).
Timings are warmed, repeated, and reported as median plus median absolute
deviation so the doubling ratios are stable.
"""

import math
import time

import numpy as np

from .errors import ConfigError
from .kron import KroneckerMatrix, kron_apply
from .linalg import COMPLEX, dtype_for
from .rng import STREAM_DIAG, generator


def _make_operands(n, mode, batch, field, rng):
    dtype = dtype_for(field)
    x = rng.standard_normal((batch, n))
    if field == COMPLEX:
        x = x + 1j * rng.standard_normal((batch, n))
    x = x.astype(dtype)
    if mode == "dense":
        w = rng.standard_normal((n, n))
        if field == COMPLEX:
            w = w + 1j * rng.standard_normal((n, n))
        w = w.astype(dtype)
        return x, (lambda: x @ w.T)
    if mode == "kron":
        f = int(math.log2(n))
        if 2 ** f != n:
            raise ConfigError(f"kron bench sizes must be powers of 2, got {n}")
        factors = []
        for _ in range(f):
            a = rng.standard_normal((2, 2))
            if field == COMPLEX:
                a = a + 1j * rng.standard_normal((2, 2))
            factors.append(a.astype(dtype))
        w = KroneckerMatrix(factors)
        return x, (lambda: kron_apply(x, w))
    raise ConfigError(f"unknown bench mode {mode!r}")


def _time_once(fn, inner):
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def run_bench(sizes, modes=("dense", "kron"), batch=32, reps=20, warmup=3,
              field=COMPLEX, seed=0, target_rep_seconds=2e-3):
    """One row per (size, mode): median and MAD of per-call seconds."""
    rows = []
    rng = generator(seed, STREAM_DIAG)
    for mode in modes:
        for n in sizes:
            _, fn = _make_operands(n, mode, batch, field, rng)
            for _ in range(warmup):
                fn()
            est = _time_once(fn, 1)
            inner = max(1, int(target_rep_seconds / max(est, 1e-9)))
            times = np.array([_time_once(fn, inner) for _ in range(reps)])
            med = float(np.median(times))
            mad = float(np.median(np.abs(times - med)))
            rows.append({"mode": mode, "n": n, "median_s": med, "mad_s": mad,
                         "reps": reps, "batch": batch})
    return rows


def doubling_ratios(rows, mode):
    """median(2N) / median(N) for consecutive sizes of one mode."""
    med = {r["n"]: r["median_s"] for r in rows if r["mode"] == mode}
    sizes = sorted(med)
    return {n: med[2 * n] / med[n] for n in sizes if 2 * n in med}

"""Spectral and gradient-flow instrumentation.

The spectral norm comes from power iteration on the implicit operator
W^H W: Kronecker operators are applied factor-wise and never expanded
here (the hermitian of a Kronecker product is the Kronecker product of
the factor hermitians, in the same order).  The unitarity residual
||W^H W - I||_F likewise reduces to factor-level quantities:

    ||kron(G_f) - I||_F^2 = prod ||G_f||_F^2 - 2 prod tr(G_f) + N

with G_f = W_f^H W_f (each trace is real nonnegative).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .kron import KroneckerMatrix, kron_apply, kron_expand
from .linalg import COMPLEX, dtype_for
from .rng import STREAM_DIAG, generator

DENSE_EIG_LIMIT = 128


def _as_operator(w):
    if isinstance(w, KroneckerMatrix):
        return w
    return KroneckerMatrix([np.asarray(w)])


def _require_square_op(w, op):
    if w.out_dim != w.in_dim:
        raise ShapeMismatchError(
            f"{op}: operator is {w.out_dim}x{w.in_dim}, must be square")


def _matvec(w, v):
    return kron_apply(v[None, :], w)[0]


def spectral_norm(w, iters=200, tol=1e-10, seed=0):
    """Largest singular value via power iteration on W^H W.

    Kronecker operators stay factored.  On non-convergence the last
    estimate is returned with a warning.
    """
    w = _as_operator(w)
    _require_square_op(w, "spectral_norm")
    wh = w.hermitian()
    rng = generator(seed, STREAM_DIAG)
    v = rng.standard_normal(w.in_dim)
    if w.field == COMPLEX:
        v = v + 1j * rng.standard_normal(w.in_dim)
    v = v.astype(dtype_for(w.field))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        u = _matvec(w, v)
        new_estimate = float(np.linalg.norm(u))
        back = _matvec(wh, u)
        nb = np.linalg.norm(back)
        if nb == 0.0:
            return 0.0
        v = back / nb
        if abs(new_estimate - estimate) < tol * max(new_estimate, 1.0):
            return new_estimate
        estimate = new_estimate
    warnings.warn(f"spectral_norm: no convergence after {iters} iterations; "
                  f"returning last estimate {estimate}")
    return estimate


def spectral_norm_factored(w):
    """Fast path: the norm of a Kronecker product is the product of the
    factor norms (cross-checked against power iteration in the tests)."""
    w = _as_operator(w)
    out = 1.0
    for f in w.factors:
        out *= float(np.linalg.svd(f, compute_uv=False)[0])
    return out


def spectral_radius_lower_bound(w, iters=200, tol=1e-8, seed=0):
    """Dominant-eigenvalue magnitude estimated by power iteration on W.

    Combines the Rayleigh magnitude |v^H W v| with the growth-rate
    estimate (||W^k v|| / ||v||)^(1/k); the latter equals the radius
    exactly for unitary operators, where plain power iteration has no
    dominant mode to converge to.  For normal operators both estimates
    are true lower bounds of the radius; in general the value never
    exceeds the spectral norm.
    """
    w = _as_operator(w)
    _require_square_op(w, "spectral_radius_lower_bound")
    rng = generator(seed, STREAM_DIAG)
    v = rng.standard_normal(w.in_dim)
    if w.field == COMPLEX:
        v = v + 1j * rng.standard_normal(w.in_dim)
    v = v.astype(dtype_for(w.field))
    v /= np.linalg.norm(v)
    rayleigh = 0.0
    log_growth = 0.0
    for _ in range(iters):
        u = _matvec(w, v)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        rayleigh = abs(np.vdot(v, u))
        log_growth += np.log(nu)
        v = u / nu
    gelfand = float(np.exp(log_growth / iters))
    estimate = max(float(rayleigh), gelfand)
    return float(min(estimate, spectral_norm(w, iters=iters, tol=tol, seed=seed)))


def _prod1p_minus1(xs):
    """prod(1 + x_f) - 1 accumulated incrementally (no N-sized cancellation)."""
    p = 0.0
    for x in xs:
        p = p + x + p * x
    return p


def unitarity_residual(w):
    """||W^H W - I||_F computed factor-wise, without expansion.

    With G_f = W_f^H W_f and n_f the factor size, the exact identity

        ||kron(G_f) - I||_F^2 = prod ||G_f||_F^2 - 2 prod tr(G_f) + N

    is rewritten in terms of the small per-factor quantities
    gamma_f = ||G_f - I||_F^2 / n_f and beta_f = tr(G_f - I) / n_f, which
    keeps full precision when every factor is near unitary (the direct
    product form loses ~sqrt(N eps) to cancellation).
    """
    w = _as_operator(w)
    _require_square_op(w, "unitarity_residual")
    alphas = []
    betas = []
    for f in w.factors:
        n_f = f.shape[0]
        delta = f.conj().T @ f
        delta[np.diag_indices_from(delta)] -= 1.0
        gamma = float(np.sum(np.abs(delta) ** 2)) / n_f
        beta = float(np.real(np.trace(delta))) / n_f
        alphas.append(gamma + 2.0 * beta)
        betas.append(beta)
    value = w.out_dim * (_prod1p_minus1(alphas) - 2.0 * _prod1p_minus1(betas))
    return float(np.sqrt(max(value, 0.0)))


def condition_number(w):
    """sigma_max / sigma_min of the dense operator; None above the size
    guard (dense SVD is an oracle path, not a performance path)."""
    w = _as_operator(w)
    _require_square_op(w, "condition_number")
    if w.out_dim > DENSE_EIG_LIMIT:
        return None
    s = np.linalg.svd(kron_expand(w), compute_uv=False)
    if s[-1] == 0.0:
        return float(np.inf)
    return float(s[0] / s[-1])


@dataclass
class SpectralReport:
    spectral_norm: float
    spectral_radius_lower_bound: float
    unitarity_residual: float
    condition_number: float | None

    def to_dict(self):
        d = {
            "spectral_norm": self.spectral_norm,
            "spectral_radius_lower_bound": self.spectral_radius_lower_bound,
            "unitarity_residual": self.unitarity_residual,
            "condition_number": self.condition_number,
        }
        if self.condition_number is None:
            d["condition_number_note"] = (
                f"omitted: dense SVD limited to N <= {DENSE_EIG_LIMIT}")
        return d


def spectral_report(w, iters=200, tol=1e-8, seed=0):
    w = _as_operator(w)
    return SpectralReport(
        spectral_norm=spectral_norm(w, iters=iters, tol=tol, seed=seed),
        spectral_radius_lower_bound=spectral_radius_lower_bound(
            w, iters=iters, tol=tol, seed=seed),
        unitarity_residual=unitarity_residual(w),
        condition_number=condition_number(w),
    )


def gradient_flow_trace(cell, params, batch, unitary_amplitude=0.0):
    """Per-timestep ||dL/dh_t||_2 recorded during one BPTT pass."""
    from .training import bptt_loss_and_grads
    result = bptt_loss_and_grads(cell, params, batch,
                                 unitary_amplitude=unitary_amplitude,
                                 record_trace=True)
    return result.gradient_trace


def amplitude_sweep(config, amplitudes, out_root=None):
    """Train one job per amplitude with a shared seed; returns the rows
    (amplitude, final residual, final spectral norm, validation metric).

    Per-run failures are recorded and the sweep continues.
    """
    from .runner import run_training

    rows = []
    for amp in amplitudes:
        cfg = config.replace(unitary_amplitude=float(amp))
        out_dir = None
        if out_root is not None:
            out_dir = str(out_root) + f"/lambda_{amp:g}"
        try:
            summary = run_training(cfg, out_dir=out_dir)
            rows.append({
                "lambda": float(amp),
                "residual": summary["final_unitarity_residual"],
                "spectral_norm": summary["final_spectral_norm"],
                "valid_metric": summary["best_valid_metric"],
            })
        except Exception as exc:  # propagated per-run failure, sweep continues
            rows.append({
                "lambda": float(amp),
                "residual": float("nan"),
                "spectral_norm": float("nan"),
                "valid_metric": float("nan"),
                "error": f"{type(exc).__name__}: {exc}",
            })
    return rows

"""Kronecker-factored linear operators and their strided kernels.

An (N x K) operator W is stored as an ordered list of factors
[W_0, ..., W_{F-1}], W_f of shape (P_f x Q_f) with prod P_f = N and
prod Q_f = K; W is the Kronecker product of the factors and is never
materialized on hot paths.  ``kron_forward`` evaluates Y = X @ W.T one
factor at a time: at stage f the running buffer of shape (rows, cols) is
viewed as (rows, Q_f, cols/Q_f), contracted with W_f on the middle axis,
and the produced P_f axis is folded into the rows.  After all F stages the
buffer is exactly X @ W.T in row-major order.  For all-2x2 factors the
cost is Theta(M N log2 N) instead of Theta(M N^2).

Gradients follow the split-real convention: a complex gradient array
packs d/d(re) in its real part and d/d(im) in its imaginary part, so a
plain step ``param -= lr * grad`` descends on both halves.  Under that
convention, for the scalar objective Re(sum(conj(gY) * Y)):

    dW_f[p, q] = sum_{m,s} G[m, p, s] * conj(Z[m, q, s])
    dZ[m, q, s] = sum_p conj(W_f[p, q]) * G[m, p, s]

which the reverse stage loop below applies factor by factor.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (CacheMismatchError, FieldMismatchError,
                     ShapeMismatchError, SizeGuardError)
from .linalg import COMPLEX, REAL, dtype_for, field_of, hermitian
from .rng import generator

EXPAND_GUARD_ENTRIES = 1 << 26


@dataclass
class KroneckerMatrix:
    """Ordered Kronecker factors with shape bookkeeping.

    ``frozen`` marks operators whose gradients are computed but discarded
    by the trainer (fixed random-unitary recurrence).
    """

    factors: list
    frozen: bool = False

    def __post_init__(self):
        if not self.factors:
            raise ShapeMismatchError("KroneckerMatrix requires at least one factor")
        factors = []
        for i, f in enumerate(self.factors):
            f = np.asarray(f)
            if f.ndim != 2:
                raise ShapeMismatchError(
                    f"factor {i} must be 2-D, got shape {f.shape}")
            factors.append(np.ascontiguousarray(f))
        fields = {field_of(f) for f in factors}
        if len(fields) != 1:
            raise FieldMismatchError("all Kronecker factors must share one field")
        self.factors = factors

    @property
    def num_factors(self):
        return len(self.factors)

    @property
    def shapes(self):
        return [f.shape for f in self.factors]

    @property
    def out_dim(self):
        n = 1
        for f in self.factors:
            n *= f.shape[0]
        return n

    @property
    def in_dim(self):
        k = 1
        for f in self.factors:
            k *= f.shape[1]
        return k

    @property
    def field(self):
        return field_of(self.factors[0])

    @property
    def is_square(self):
        return all(f.shape[0] == f.shape[1] for f in self.factors)

    def hermitian(self):
        """Factor-wise conjugate transpose; equals the hermitian of the product."""
        return KroneckerMatrix([hermitian(f) for f in self.factors], frozen=self.frozen)

    def copy(self):
        return KroneckerMatrix([f.copy() for f in self.factors], frozen=self.frozen)


@dataclass
class KronForwardCache:
    """Intermediate stage outputs of one ``kron_forward`` call.

    ``stages[f]`` is the buffer after contracting factor f (flat stage
    layout); the final entry is reshaped to (M x N).
    """

    stages: list
    batch_rows: int
    in_dim: int
    shapes: list

    @property
    def output(self):
        return self.stages[-1]


@dataclass
class KronGradients:
    gw: list
    gx: np.ndarray


def parameter_count(w):
    """Scalar parameter count: 2 per entry in the complex field, 1 in the real."""
    c = 2 if w.field == COMPLEX else 1
    return c * sum(p * q for p, q in w.shapes)


def kron_expand(w):
    """Materialize the full (N x K) product; the oracle for the kernels."""
    n, k = w.out_dim, w.in_dim
    if n * k > EXPAND_GUARD_ENTRIES:
        raise SizeGuardError(
            f"expansion of {n}x{k} exceeds the {EXPAND_GUARD_ENTRIES}-entry guard")
    out = w.factors[0]
    for f in w.factors[1:]:
        out = np.kron(out, f)
    return out


def _check_forward_args(x, w, op):
    if x.ndim != 2:
        raise ShapeMismatchError(f"{op}: input must be 2-D, got shape {x.shape}")
    if x.shape[1] != w.in_dim:
        raise ShapeMismatchError(
            f"{op}: input shape {x.shape} does not match operator "
            f"{w.out_dim}x{w.in_dim}")
    if field_of(x) != w.field:
        raise FieldMismatchError(
            f"{op}: input field {field_of(x)} vs operator field {w.field}")


def _stage(buf, factor):
    """Contract the leading q-block of every row with one factor.

    out[m, p, s] = sum_q factor[p, q] * buf[m, q*s_len + s]

    Three equivalent evaluation orders, picked by shape: a flat GEMM when
    the trailing stride is 1, a broadcast matmul while the row count is
    small, and transpose+GEMM once the row count makes the broadcast
    matmul's per-matrix overhead dominate.
    """
    rows, cols = buf.shape
    p, q = factor.shape
    s = cols // q
    if s == 1:
        return (buf @ factor.T).reshape(rows * p, 1)
    if rows <= 128:
        out = np.matmul(factor, buf.reshape(rows, q, s))
        return out.reshape(rows * p, s)
    tmp = np.ascontiguousarray(buf.reshape(rows, q, s).transpose(0, 2, 1))
    out = (tmp.reshape(rows * s, q) @ factor.T).reshape(rows, s, p)
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(rows * p, s)


def kron_forward(x, w):
    """Y = X @ W.T with all intermediate stage outputs cached for backward."""
    _check_forward_args(x, w, "kron_forward")
    m = x.shape[0]
    buf = x
    stages = []
    for f in w.factors:
        buf = _stage(buf, f)
        stages.append(buf)
    stages[-1] = stages[-1].reshape(m, w.out_dim)
    return stages[-1], KronForwardCache(stages, m, w.in_dim, list(w.shapes))


def kron_apply(x, w):
    """Y = X @ W.T without retaining intermediates (inference path)."""
    _check_forward_args(x, w, "kron_apply")
    m = x.shape[0]
    buf = x
    for f in w.factors:
        buf = _stage(buf, f)
    return buf.reshape(m, w.out_dim)


def _check_cache(x, w, cache, gy):
    m = x.shape[0]
    if cache.batch_rows != m or cache.in_dim != w.in_dim \
            or cache.shapes != list(w.shapes) or len(cache.stages) != w.num_factors:
        raise CacheMismatchError(
            "forward cache does not match the given input/operator")
    if gy.shape != (m, w.out_dim):
        raise ShapeMismatchError(
            f"kron_backward: upstream gradient shape {gy.shape} != "
            f"({m}, {w.out_dim})")
    if field_of(gy) != w.field:
        raise FieldMismatchError("kron_backward: gradient field mismatch")


def kron_backward(x, w, cache, gy):
    """Reverse-mode gradients of ``kron_forward`` for objective Re<gY, Y>.

    Returns per-factor gradients (same shapes as the factors) and the
    gradient with respect to the dense input.
    """
    _check_forward_args(x, w, "kron_backward")
    _check_cache(x, w, cache, gy)
    m, k = x.shape

    # Row/column extents of the buffer entering each stage.
    rows = [m]
    cols = [k]
    for p, q in w.shapes:
        rows.append(rows[-1] * p)
        cols.append(cols[-1] // q)

    gw = []
    gbuf = gy.reshape(rows[-1], cols[-1])
    for f in range(w.num_factors - 1, -1, -1):
        p, q = w.shapes[f]
        s = cols[f] // q
        stage_in = x if f == 0 else cache.stages[f - 1]
        if s == 1:
            g2 = gbuf.reshape(rows[f], p)
            z2 = stage_in.reshape(rows[f], q)
            gw.append(g2.T @ z2.conj())
        else:
            g3t = np.ascontiguousarray(
                gbuf.reshape(rows[f], p, s).transpose(1, 0, 2)
            ).reshape(p, rows[f] * s)
            z3t = np.ascontiguousarray(
                stage_in.reshape(rows[f], q, s).transpose(1, 0, 2)
            ).reshape(q, rows[f] * s)
            gw.append(g3t @ z3t.conj().T)
        # dL/d(stage input) is itself a stage contraction with W_f^H
        gbuf = _stage(gbuf.reshape(rows[f], p * s),
                      w.factors[f].conj().T).reshape(rows[f], cols[f])
    gw.reverse()
    return KronGradients(gw=gw, gx=gbuf.reshape(m, k))


def _require_square(w, op):
    for i, (p, q) in enumerate(w.shapes):
        if p != q:
            raise ShapeMismatchError(
                f"{op}: factor {i} is {p}x{q}; all factors must be square")


def soft_unitary_penalty(w, amplitude):
    """amplitude * sum_f ||W_f^H W_f - I||_F^2, pulling factors toward unitarity."""
    _require_square(w, "soft_unitary_penalty")
    if amplitude < 0:
        raise ValueError(f"penalty amplitude must be >= 0, got {amplitude}")
    total = 0.0
    for f in w.factors:
        gram = f.conj().T @ f
        gram[np.diag_indices_from(gram)] -= 1.0
        total += float(np.sum(np.abs(gram) ** 2))
    return amplitude * total


def soft_unitary_grad(w, amplitude):
    """Per-factor gradient of ``soft_unitary_penalty``: 4 a W_f (W_f^H W_f - I)."""
    _require_square(w, "soft_unitary_grad")
    if amplitude < 0:
        raise ValueError(f"penalty amplitude must be >= 0, got {amplitude}")
    grads = []
    for f in w.factors:
        gram = f.conj().T @ f
        gram[np.diag_indices_from(gram)] -= 1.0
        grads.append((4.0 * amplitude) * (f @ gram))
    return grads


def random_unitary_factors(shapes, seed, field=COMPLEX, frozen=False):
    """Haar-distributed unitary (orthogonal) factors, deterministic in ``seed``.

    QR of a Gaussian matrix with the R-diagonal phase folded back into Q,
    which makes the distribution Haar and Q exactly unitary to rounding.
    """
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed)
    dtype = dtype_for(field)
    factors = []
    for p, q in shapes:
        if p != q:
            raise ShapeMismatchError(
                f"random_unitary_factors: shape {p}x{q} is not square")
        a = rng.standard_normal((p, p))
        if field == COMPLEX:
            a = a + 1j * rng.standard_normal((p, p))
        qmat, r = np.linalg.qr(a)
        d = np.diagonal(r)
        qmat = qmat * (d / np.abs(d))
        factors.append(np.ascontiguousarray(qmat.astype(dtype)))
    return KroneckerMatrix(factors, frozen=frozen)


def near_identity_factors(shapes, seed, scale=0.01, field=REAL, frozen=False):
    """I + scale * Gaussian per factor; the Kronecker-LSTM initialization."""
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed)
    dtype = dtype_for(field)
    factors = []
    for p, q in shapes:
        if p != q:
            raise ShapeMismatchError(
                f"near_identity_factors: shape {p}x{q} is not square")
        a = rng.standard_normal((p, p))
        if field == COMPLEX:
            a = a + 1j * rng.standard_normal((p, p))
        factors.append(np.ascontiguousarray(np.eye(p) + scale * a).astype(dtype))
    return KroneckerMatrix(factors, frozen=frozen)

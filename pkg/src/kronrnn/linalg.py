"""Dense real/complex matrix primitives used by every other module.

Matrices are 2-D numpy arrays in row-major (C) order: ``float64`` carries
the real field, ``complex128`` the complex field (interleaved re/im pairs
in memory).  All functions are pure and never mutate their inputs.
"""

import numpy as np

from .errors import FieldMismatchError, ShapeMismatchError

REAL = "real"
COMPLEX = "complex"

_DTYPES = {REAL: np.float64, COMPLEX: np.complex128}


def dtype_for(field):
    try:
        return _DTYPES[field]
    except KeyError:
        raise FieldMismatchError(f"unknown field {field!r}; expected 'real' or 'complex'")


def field_of(a):
    return COMPLEX if np.iscomplexobj(a) else REAL


def as_matrix(a, field=None):
    """Coerce to a C-contiguous 2-D matrix of the requested (or inferred) field."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got shape {a.shape}")
    if field is None:
        field = field_of(a)
    return np.ascontiguousarray(a, dtype=dtype_for(field))


def _check_same_field(a, b, op):
    if field_of(a) != field_of(b):
        raise FieldMismatchError(
            f"{op}: mixed fields {field_of(a)} and {field_of(b)}")


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shape {a.shape} does not match {b.shape}")


def matmul(a, b):
    """Matrix product a @ b with shape/field validation."""
    _check_same_field(a, b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def hermitian(a):
    """Conjugate transpose; plain transpose in the real field."""
    return np.ascontiguousarray(a.conj().T)


def frobenius_norm_sq(a):
    """Sum of squared entry magnitudes."""
    return float(np.sum(np.abs(a) ** 2))


def add(a, b):
    _check_same_shape(a, b, "add")
    return a + b


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return a - b


def scale(a, alpha):
    return alpha * a


def axpy(alpha, x, y):
    """alpha * x + y."""
    _check_same_shape(x, y, "axpy")
    return alpha * x + y


def elementwise_mul(a, b):
    _check_same_shape(a, b, "elementwise_mul")
    return a * b


def identity(n, field=REAL):
    return np.eye(n, dtype=dtype_for(field))

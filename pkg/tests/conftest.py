"""Shared test helpers: finite differences, parameter-tree walking, and a
tiny in-memory IDX file builder."""

import os
import struct

# Bitwise determinism (and the bench scaling contract) assume single-thread
# BLAS; must be set before numpy first loads.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest


def leaves(tree):
    """(name, array) pairs; list values get '.i' suffixes."""
    for key, value in tree.items():
        if isinstance(value, list):
            for i, arr in enumerate(value):
                yield f"{key}.{i}", arr
        else:
            yield key, value


def numerical_grad_entry(loss_fn, arr, idx, eps=1e-5, imag=False):
    """Central difference of loss_fn() w.r.t. one real coordinate of arr."""
    delta = 1j * eps if imag else eps
    arr[idx] += delta
    lp = loss_fn()
    arr[idx] -= 2 * delta
    lm = loss_fn()
    arr[idx] += delta
    return (lp - lm) / (2 * eps)


def check_grads_fd(params, grads, loss_fn, eps=1e-5, rtol=1e-6, atol=1e-8,
                   max_entries=8, rng=None, only=None):
    """Compare analytic grads against central differences.

    Samples up to ``max_entries`` coordinates per array (both real and
    imaginary parts for complex parameters).  ``only`` restricts the check
    to a subset of leaf names.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    gmap = dict(leaves(grads))
    checked = 0
    for name, arr in leaves(params):
        if name not in gmap:
            continue
        if only is not None and name not in only:
            continue
        g = gmap[name]
        size = arr.size
        take = min(max_entries, size)
        flat_ids = rng.choice(size, size=take, replace=False)
        for flat in flat_ids:
            idx = tuple(int(i) for i in np.unravel_index(flat, arr.shape))
            comps = [(False, np.real)]
            if np.iscomplexobj(arr):
                comps.append((True, np.imag))
            for imag, part in comps:
                fd = numerical_grad_entry(loss_fn, arr, idx, eps=eps, imag=imag)
                an = float(part(g[idx])) if np.iscomplexobj(g) else \
                    (0.0 if imag else float(g[idx]))
                err = abs(an - fd)
                assert err <= atol + rtol * abs(fd), (
                    f"{name}{idx} {'im' if imag else 're'}: "
                    f"analytic {an} vs fd {fd} (err {err:.3e})")
                checked += 1
    assert checked > 0, "finite-difference check exercised no coordinates"
    return checked


def rel_err(actual, expected):
    num = np.linalg.norm(np.asarray(actual) - np.asarray(expected))
    den = max(np.linalg.norm(np.asarray(expected)), 1e-30)
    return num / den


def make_idx_images(images):
    """Serialize a (count, rows, cols) uint8 array as IDX bytes."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    header = struct.pack(">iiii", 2051, count, rows, cols)
    return header + images.tobytes()


def make_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">ii", 2049, labels.shape[0])
    return header + labels.tobytes()


@pytest.fixture
def tmp_idx_pair(tmp_path):
    """Write a small synthetic IDX image/label pair; returns the two paths."""
    def _write(images, labels, prefix="set"):
        ipath = tmp_path / f"{prefix}-images-idx3-ubyte"
        lpath = tmp_path / f"{prefix}-labels-idx1-ubyte"
        ipath.write_bytes(make_idx_images(images))
        lpath.write_bytes(make_idx_labels(labels))
        return str(ipath), str(lpath)
    return _write

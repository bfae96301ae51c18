"""Seeding policy: one Philox counter-based generator per (seed, stream, counter).

Philox is a named, splittable, counter-based bit generator, so every
consumer of randomness in the package derives an independent stream from
the run's master seed without any shared mutable state.  Reruns with the
same seed are bitwise reproducible on a single thread.

Stream ids used by the package (documented, stable):
    0 parameter initialization
    1 training-batch generation (counter = update index)
    2 validation-batch generation
    3 test-batch generation
    4 diagnostics (power-iteration start vectors, pixel permutations)
    5 per-epoch shuffling (counter = epoch index)
"""

import numpy as np

STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_VALID = 2
STREAM_TEST = 3
STREAM_DIAG = 4
STREAM_SHUFFLE = 5

_COUNTER_BITS = 48


def generator(seed, stream=0, counter=0):
    """Return a ``numpy.random.Generator`` for (seed, stream, counter).

    ``counter`` must fit in 48 bits (plenty for update/epoch indices).
    """
    if counter < 0 or counter >= (1 << _COUNTER_BITS):
        raise ValueError(f"rng counter out of range: {counter}")
    key = np.array(
        [np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF),
         (np.uint64(stream) << np.uint64(_COUNTER_BITS)) | np.uint64(counter)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))

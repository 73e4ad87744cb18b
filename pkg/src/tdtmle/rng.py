"""Counter-based random substreams.

Every stochastic component draws from a Philox stream keyed by
(seed, stream index), so results never depend on how work is batched,
chunked, or parallelized.
"""

import numpy as np

# Reserved stream indices (trajectory streams use indices 0..n-1).
PARAM_STREAM = 2**64 - 1
INIT_STREAM = 2**64 - 2
SHUFFLE_STREAM = 2**64 - 3
DROPOUT_STREAM = 2**64 - 4
SPLIT_STREAM = 2**64 - 5


def substream(seed, index, attempt=0):
    key = np.array([seed % 2**64, index % 2**64], dtype=np.uint64)
    bg = np.random.Philox(key=key)
    if attempt:
        bg = bg.jumped(attempt)
    return np.random.Generator(bg)

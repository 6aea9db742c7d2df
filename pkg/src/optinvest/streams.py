"""Counter-based Gaussian streams keyed by (seed, path index).

Path ``p`` owns a fixed window of the Philox counter space, so its normals
depend only on the seed and ``p``. Any path block can be generated on its own
in any order and the draws come out the same. Uniforms come from the raw
64-bit words and go through the inverse normal CDF, so every draw consumes
exactly one word.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_WORDS_PER_COUNTER = 4


def _stride(n_steps: int) -> int:
    return -(-n_steps // _WORDS_PER_COUNTER) * _WORDS_PER_COUNTER


def path_normals(seed: int, first_path: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normals of shape ``(n_steps, n_paths)`` for paths ``first_path...``."""
    stride = _stride(n_steps)
    bg = np.random.Philox(key=int(seed) & (2**64 - 1),
                          counter=first_path * (stride // _WORDS_PER_COUNTER))
    raw = bg.random_raw(n_paths * stride).reshape(n_paths, stride)[:, :n_steps]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u).T


def path_blocks(n_paths: int, block: int = 8192):
    for start in range(0, n_paths, block):
        yield start, min(block, n_paths - start)

"""
Multinomial cell counts truncated to "every cell occupied".

Exact mode walks the compositions of n into c positive parts (stars and
bars: choose c - 1 cut points out of 1..n-1) in fixed-size batches and
weights each with ``scipy.stats.multinomial.logpmf``; the normalising
constant is the sum of the enumerated probabilities. Sampling mode draws
multinomial vectors and rejects any with an empty cell.
"""

from __future__ import annotations

import itertools
import logging
import math
from typing import Iterator

import numpy as np
from scipy.stats import multinomial

from RW.Lab import DegenerateCellsError, LabInputError, SizeLimitError

logger = logging.getLogger(__name__)

BATCH_STATES = 262_144
SAMPLE_BATCH = 65_536


def count_states(n: int, cells: int) -> int:
    """Number of compositions of n into ``cells`` parts, each at least 1."""
    if cells < 1 or n < cells:
        return 0
    return math.comb(n - 1, cells - 1)


def check_state_space(n: int, cells: int, max_states: int) -> int:
    states = count_states(n, cells)
    if states == 0:
        raise LabInputError(f"n={n} cannot fill {cells} cells with at least one observation each")
    if states > max_states:
        raise SizeLimitError(
            f"exact enumeration needs {states:,} count configurations (cap {max_states:,}); "
            "use CountMonteCarlo mode instead"
        )
    return states


def iter_compositions(n: int, cells: int, batch: int = BATCH_STATES) -> Iterator[np.ndarray]:
    """Yield (m, cells) int arrays covering every positive composition of n exactly once."""
    if cells == 1:
        yield np.array([[n]], dtype=np.int64)
        return
    cuts_iter = itertools.combinations(range(1, n), cells - 1)
    while True:
        chunk = list(itertools.islice(cuts_iter, batch))
        if not chunk:
            return
        cuts = np.array(chunk, dtype=np.int64)
        edges = np.column_stack([np.zeros(len(cuts), dtype=np.int64), cuts, np.full(len(cuts), n, dtype=np.int64)])
        yield np.diff(edges, axis=1)


def composition_log_weights(counts: np.ndarray, n: int, probs: np.ndarray) -> np.ndarray:
    """Untruncated multinomial log-probabilities of each row of ``counts``."""
    return np.atleast_1d(multinomial.logpmf(counts, n, probs))


def sample_full_counts(
    n: int,
    probs: np.ndarray,
    draws: int,
    rng: np.random.Generator,
    max_rounds: int = 1000,
) -> np.ndarray:
    """``draws`` multinomial count vectors conditioned on every cell being positive."""
    if np.any(probs <= 0):
        cell = int(np.flatnonzero(probs <= 0)[0])
        raise DegenerateCellsError(f"cell {cell} has zero probability; it can never be filled", cell // 2 + 1, cell % 2, 0)
    kept = []
    total = 0
    for _ in range(max_rounds):
        block = rng.multinomial(n, probs, size=max(SAMPLE_BATCH, draws - total))
        block = block[np.all(block > 0, axis=1)]
        kept.append(block)
        total += len(block)
        if total >= draws:
            return np.concatenate(kept)[:draws]
    cell = int(np.argmin(probs))
    raise DegenerateCellsError(
        f"only {total} of {draws} count draws had every cell filled after {max_rounds} rounds",
        cell // 2 + 1, cell % 2, max_rounds,
    )


def normalise_log_weights(log_weights: np.ndarray) -> tuple:
    """Return (weights summing to 1, log of the total untruncated mass)."""
    top = float(np.max(log_weights))
    if not np.isfinite(top):
        raise DegenerateCellsError("every count configuration has zero probability", 0, 0, 0)
    scaled = np.exp(log_weights - top)
    total = scaled.sum()
    return scaled / total, top + math.log(total)

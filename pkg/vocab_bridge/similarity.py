"""
CSLS similarity between mapped source rows and target rows.

    csls(x, y) = 2 cos(x, y) - r_T(x) - r_S(y)

r_T(x) is the mean cosine of x to its k nearest target rows and r_S(y) the
mean cosine of y to its k nearest mapped source rows. The |V^Q| x |V^P| score
matrix is never materialized unless asked for: rows are produced in blocks.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

from .embed_store import EmbeddingSet
from .errors import DimensionMismatchError, InvalidArgumentError

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 1024


@dataclass(frozen=True)
class SimilarityBlock:
    """CSLS scores for source rows ``start .. start + len(scores)``."""

    start: int
    scores: np.ndarray
    k_neighbors: int

    @property
    def stop(self) -> int:
        return self.start + self.scores.shape[0]


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    # zero rows keep cosine 0 against everything
    return np.divide(m, norms, out=np.zeros_like(m, dtype=np.float64), where=norms > 0)


def _mean_top_k(cos: np.ndarray, k: int) -> np.ndarray:
    return np.partition(cos, cos.shape[1] - k, axis=1)[:, -k:].mean(axis=1)


def _ranges(total: int, block_size: int) -> Iterator[Tuple[int, int]]:
    for start in range(0, total, block_size):
        yield start, min(total, start + block_size)


class CslsScores:
    """Lazily evaluated CSLS matrix with precomputed hubness penalties."""

    def __init__(self, source: np.ndarray, target: np.ndarray, k: int, block_size: int, threads: int):
        self.source = source
        self.target = target
        self.k = k
        self.block_size = block_size
        self.threads = max(1, threads)
        self.r_target = self._penalties(source, target)
        self.r_source = self._penalties(target, source)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.source.shape[0], self.target.shape[0]

    def _penalties(self, queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
        chunks = self._ordered_map(
            lambda r: _mean_top_k(queries[r[0]:r[1]] @ pool.T, self.k),
            _ranges(queries.shape[0], self.block_size),
        )
        return np.concatenate(list(chunks)) if queries.shape[0] else np.zeros(0)

    def _ordered_map(self, fn, items: Iterable) -> Iterator:
        """Apply ``fn`` over ``items`` with a bounded window of workers, yielding in order."""
        if self.threads == 1:
            for item in items:
                yield fn(item)
            return
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            pending = deque()
            for item in items:
                pending.append(pool.submit(fn, item))
                if len(pending) >= 2 * self.threads:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

    def score_rows(self, rows: Sequence[int]) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        cos = self.source[rows] @ self.target.T
        return 2.0 * cos - self.r_target[rows, None] - self.r_source[None, :]

    def block(self, start: int, stop: int) -> SimilarityBlock:
        cos = self.source[start:stop] @ self.target.T
        scores = 2.0 * cos - self.r_target[start:stop, None] - self.r_source[None, :]
        return SimilarityBlock(start, scores, self.k)

    def blocks(self, block_size: Optional[int] = None) -> Iterator[SimilarityBlock]:
        size = block_size or self.block_size
        return self._ordered_map(lambda r: self.block(*r), _ranges(self.shape[0], size))

    def dense(self) -> np.ndarray:
        return np.vstack([b.scores for b in self.blocks()]) if self.shape[0] else np.zeros(self.shape)

    def nearest(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        """Best-scoring target id per source row (lowest id on ties)."""
        if rows is not None:
            return np.argmax(self.score_rows(rows), axis=1)
        return np.concatenate([np.argmax(b.scores, axis=1) for b in self.blocks()])


def csls(
    mapped: EmbeddingSet,
    target: EmbeddingSet,
    k: int = 10,
    block_size: int = DEFAULT_BLOCK_SIZE,
    threads: int = 1,
) -> CslsScores:
    """
    Prepare CSLS scores of ``mapped`` (source rows already in target space) vs ``target``.

    Rows are length-normalized internally.
    """
    if mapped.dim != target.dim:
        raise DimensionMismatchError(f"Mapped source has dim {mapped.dim}, target has dim {target.dim}")
    limit = min(len(mapped), len(target))
    if not 1 <= k < limit:
        raise InvalidArgumentError(f"CSLS k must satisfy 1 <= k < {limit}, got {k}")
    if block_size < 1:
        raise InvalidArgumentError(f"block_size must be positive, got {block_size}")
    logger.info(f"CSLS over {len(mapped)} x {len(target)} tokens (k={k}, block={block_size}, threads={threads})")
    return CslsScores(_unit_rows(mapped.matrix), _unit_rows(target.matrix), k, block_size, threads)


def precision_at_1(scores: CslsScores, pairs: Sequence[Tuple[int, int]]) -> float:
    """Share of (source, target) pairs whose source row retrieves its target first."""
    if not pairs:
        return 0.0
    sources = [i for i, _ in pairs]
    expected = np.array([j for _, j in pairs])
    return float(np.mean(scores.nearest(sources) == expected))

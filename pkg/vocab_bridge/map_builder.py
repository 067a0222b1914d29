"""
Noise reduction of the CSLS stream into the sparse projection matrix W^{QP}.

Per source row, in this order:

1. top-t truncation (ties keep the lower column id),
2. threshold truncation (scores below ``threshold`` removed, equality kept),
3. variance truncation (whole row dropped when the population variance of the
   surviving scores is <= sigma and at least ``c`` of them survive).

Surviving rows are normalized to sum 1 so that ``q @ W`` moves each source
token's own probability mass. Mapping files store the float32 scores; weights
are always derived from those stored scores.
"""

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse import csr_array

from .embed_store import Vocabulary
from .errors import ArtifactIOError, CorruptArtifactError, InvalidArgumentError, ProvenanceMismatchError
from .similarity import SimilarityBlock

logger = logging.getLogger(__name__)

MAPPING_MAGIC = b"EVAM"
MAPPING_VERSION = 1
_HEADER = struct.Struct("<4sI32s32s32sQQIIddBBIQQ")
MAPPING_HEADER_SIZE = _HEADER.size
ENTRY_DTYPE = np.dtype([("i", "<u4"), ("j", "<u4"), ("score", "<f4")])


class NoiseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    t: int = Field(default=10, ge=1, description="Top-t entries kept per row")
    threshold: float = Field(default=0.1, ge=0.0, allow_inf_nan=False, description="Minimum retained similarity")
    sigma: float = Field(default=0.0001, ge=0.0, allow_inf_nan=False, description="Variance cutoff")
    c: int = Field(default=5, ge=1, description="Minimum nonzero count for the variance rule")
    row_normalize: bool = Field(default=True, description="Normalize surviving rows to sum 1")
    sample_variance: bool = Field(default=False, description="Use the n-1 variance instead of the population variance")


class RowKind(IntEnum):
    ALIGNED = 0
    DROPPED_EMPTY = 1
    DROPPED_VARIANCE = 2


@dataclass(frozen=True)
class MappingProvenance:
    source_digest: bytes
    target_digest: bytes
    noise: NoiseConfig
    inputs_digest: bytes = bytes(32)
    csls_k: int = 0


# -- row operations -----------------------------------------------------------

def _top_t_columns(row: np.ndarray, t: int) -> np.ndarray:
    if t >= row.size:
        return np.arange(row.size)
    kth = np.partition(row, row.size - t)[row.size - t]
    candidates = np.flatnonzero(row >= kth)
    # more than t candidates only when values tie at the cutoff
    order = np.argsort(-row[candidates], kind="stable")
    return np.sort(candidates[order[:t]])


def top_t_truncate(row, t: int) -> np.ndarray:
    """Zero all but the t largest entries."""
    if t < 1:
        raise InvalidArgumentError(f"t must be >= 1, got {t}")
    row = np.asarray(row, dtype=np.float64)
    out = np.zeros_like(row)
    keep = _top_t_columns(row, t)
    out[keep] = row[keep]
    return out


def threshold_truncate(row, threshold: float) -> np.ndarray:
    """Zero the entries strictly below ``threshold``."""
    row = np.asarray(row, dtype=np.float64)
    return np.where(row >= threshold, row, 0.0)


def _low_variance(values: np.ndarray, sigma: float, c: int, sample: bool) -> bool:
    ddof = 1 if sample else 0
    if values.size < c or values.size <= ddof:
        return False
    return bool(np.var(values, ddof=ddof) <= sigma)


def variance_truncate(row, sigma: float, c: int, sample: bool = False) -> np.ndarray:
    """Zero the whole row when its nonzero entries are many and nearly equal."""
    row = np.asarray(row, dtype=np.float64)
    if _low_variance(row[row != 0], sigma, c, sample):
        return np.zeros_like(row)
    return row.copy()


def truncate_row(row, cfg: NoiseConfig) -> Tuple[np.ndarray, np.ndarray, RowKind]:
    """
    Single pass of the three truncations over one similarity row.

    Returns:
        Retained column ids (ascending), their scores, and the row kind.
    """
    row = np.asarray(row, dtype=np.float64)
    cols = _top_t_columns(row, cfg.t)
    values = row[cols]
    keep = (values >= cfg.threshold) & (values > 0)
    cols, values = cols[keep], values[keep]
    if cols.size == 0:
        return cols, values, RowKind.DROPPED_EMPTY
    if _low_variance(values, cfg.sigma, cfg.c, cfg.sample_variance):
        return cols[:0], values[:0], RowKind.DROPPED_VARIANCE
    return cols, values, RowKind.ALIGNED


# -- the mapping --------------------------------------------------------------

def _row_weights(indptr: np.ndarray, scores: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return scores.copy()
    counts = np.diff(indptr)
    owner = np.repeat(np.arange(counts.size), counts)
    sums = np.zeros(counts.size)
    np.add.at(sums, owner, scores)
    return scores / sums[owner]


@dataclass(frozen=True)
class SparseMapping:
    """Sparse |V^Q| x |V^P| projection with per-row status and provenance."""

    rows: int
    cols: int
    weights: csr_array
    scores: csr_array
    row_kind: np.ndarray
    provenance: MappingProvenance

    @classmethod
    def from_arrays(
        cls,
        rows: int,
        cols: int,
        indptr: np.ndarray,
        indices: np.ndarray,
        scores: np.ndarray,
        row_kind: np.ndarray,
        provenance: MappingProvenance,
    ) -> "SparseMapping":
        scores = np.asarray(scores, dtype=np.float32).astype(np.float64)
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        weights = _row_weights(indptr, scores, provenance.noise.row_normalize)
        return cls(
            rows,
            cols,
            csr_array((weights, indices, indptr), shape=(rows, cols)),
            csr_array((scores, indices.copy(), indptr.copy()), shape=(rows, cols)),
            np.asarray(row_kind, dtype=np.uint8),
            provenance,
        )

    @classmethod
    def identity(cls, vocab: Vocabulary) -> "SparseMapping":
        """The pivot model's implicit mapping onto itself."""
        n = len(vocab)
        digest = vocab.digest()
        provenance = MappingProvenance(digest, digest, NoiseConfig(t=1, threshold=1.0, row_normalize=True))
        return cls.from_arrays(
            n, n, np.arange(n + 1), np.arange(n), np.ones(n), np.zeros(n, dtype=np.uint8), provenance
        )

    @property
    def nnz(self) -> int:
        return int(self.weights.nnz)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    def entries(self) -> Iterator[Tuple[int, int, float]]:
        indptr, indices, data = self.weights.indptr, self.weights.indices, self.weights.data
        for i in range(self.rows):
            for p in range(indptr[i], indptr[i + 1]):
                yield i, int(indices[p]), float(data[p])

    def kind_counts(self) -> dict:
        counts = np.bincount(self.row_kind, minlength=len(RowKind))
        return {kind.name.lower().replace("_", "-"): int(counts[kind]) for kind in RowKind}

    @property
    def aligned_fraction(self) -> float:
        return float(np.mean(self.row_kind == RowKind.ALIGNED)) if self.rows else 0.0


def build_mapping(
    blocks: Iterable[SimilarityBlock],
    cfg: NoiseConfig,
    rows: int,
    cols: int,
    provenance: Optional[MappingProvenance] = None,
) -> SparseMapping:
    """
    Truncate a stream of similarity blocks into a SparseMapping.

    Rows never covered by a block count as dropped-empty.
    """
    row_cols: List[Optional[np.ndarray]] = [None] * rows
    row_scores: List[Optional[np.ndarray]] = [None] * rows
    row_kind = np.full(rows, RowKind.DROPPED_EMPTY, dtype=np.uint8)

    for block in blocks:
        if block.scores.shape[1] != cols:
            raise InvalidArgumentError(f"Similarity block has {block.scores.shape[1]} columns, expected {cols}")
        for offset, row in enumerate(block.scores):
            i = block.start + offset
            kept_cols, kept_scores, kind = truncate_row(row, cfg)
            row_kind[i] = kind
            if kind == RowKind.ALIGNED:
                row_cols[i], row_scores[i] = kept_cols, kept_scores

    counts = np.array([0 if c is None else c.size for c in row_cols], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    kept = [c for c in row_cols if c is not None]
    indices = np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)
    scores = np.concatenate([s for s in row_scores if s is not None]) if kept else np.zeros(0)

    if provenance is None:
        provenance = MappingProvenance(bytes(32), bytes(32), cfg)
    mapping = SparseMapping.from_arrays(rows, cols, indptr, indices, scores, row_kind, provenance)
    logger.info(f"Built mapping {rows} x {cols}: {mapping.nnz} entries, rows by kind {mapping.kind_counts()}")
    return mapping


# -- persistence --------------------------------------------------------------

def save_mapping(m: SparseMapping, path: Union[str, Path]) -> None:
    """
    Write the mapping as a header, the dropped-variance row ids, and sorted
    ``(u32 i, u32 j, f32 score)`` triples.

    Scores are float32, so a retained score can sit up to about 1e-7 below
    the threshold it passed. Weights are rebuilt from these stored scores on load.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p, noise = m.provenance, m.provenance.noise
    dropped = np.flatnonzero(m.row_kind == RowKind.DROPPED_VARIANCE).astype("<u4")

    entries = np.empty(m.nnz, dtype=ENTRY_DTYPE)
    entries["i"] = np.repeat(np.arange(m.rows), np.diff(m.scores.indptr))
    entries["j"] = m.scores.indices
    entries["score"] = m.scores.data.astype(np.float32)

    with open(path, "wb") as f:
        f.write(_HEADER.pack(
            MAPPING_MAGIC, MAPPING_VERSION, p.source_digest, p.target_digest, p.inputs_digest,
            m.rows, m.cols, noise.t, noise.c, noise.threshold, noise.sigma,
            int(noise.row_normalize), int(noise.sample_variance), p.csls_k, dropped.size, m.nnz,
        ))
        f.write(dropped.tobytes())
        f.write(entries.tobytes())


def _unpack_header(data: bytes, path) -> Tuple[int, int, MappingProvenance, int, int]:
    if len(data) < _HEADER.size:
        raise CorruptArtifactError(f"{path}: truncated mapping header")
    (magic, version, src, tgt, inputs, rows, cols, t, c, threshold, sigma,
     row_normalize, sample_variance, csls_k, n_dropped, nnz) = _HEADER.unpack_from(data)
    if magic != MAPPING_MAGIC or version != MAPPING_VERSION:
        raise CorruptArtifactError(f"{path}: not a version {MAPPING_VERSION} mapping file")
    try:
        noise = NoiseConfig(
            t=t, c=c, threshold=threshold, sigma=sigma,
            row_normalize=bool(row_normalize), sample_variance=bool(sample_variance),
        )
    except ValueError as e:
        raise CorruptArtifactError(f"{path}: invalid noise settings in header: {e}")
    return rows, cols, MappingProvenance(src, tgt, noise, inputs, csls_k), n_dropped, nnz


def read_mapping_provenance(path: Union[str, Path]) -> Optional[MappingProvenance]:
    """Provenance stored in a mapping file header, or None when unreadable."""
    try:
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
        return _unpack_header(head, path)[2]
    except (OSError, CorruptArtifactError):
        return None


def load_mapping(
    path: Union[str, Path],
    source_vocab: Optional[Vocabulary] = None,
    target_vocab: Optional[Vocabulary] = None,
    force: bool = False,
) -> SparseMapping:
    """
    Read a mapping file, checking its vocabulary digests when vocabularies are given.

    Raises:
        CorruptArtifactError: the file is truncated or inconsistent.
        ProvenanceMismatchError: a digest differs and ``force`` is off.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactIOError(f"Mapping file {path} not found")
    rows, cols, provenance, n_dropped, nnz = _unpack_header(data, path)

    expected = _HEADER.size + 4 * n_dropped + ENTRY_DTYPE.itemsize * nnz
    if len(data) != expected:
        raise CorruptArtifactError(f"{path}: expected {expected} bytes, found {len(data)}")
    dropped = np.frombuffer(data, dtype="<u4", count=n_dropped, offset=_HEADER.size).astype(np.int64)
    entries = np.frombuffer(data, dtype=ENTRY_DTYPE, count=nnz, offset=_HEADER.size + 4 * n_dropped)

    i = entries["i"].astype(np.int64)
    j = entries["j"].astype(np.int64)
    if nnz and (i.max() >= rows or j.max() >= cols):
        raise CorruptArtifactError(f"{path}: entry ids out of range")
    if nnz > 1 and np.any(np.diff(i * cols + j) <= 0):
        raise CorruptArtifactError(f"{path}: entries are not sorted by (i, j)")
    if np.any(~(entries["score"] > 0)):
        raise CorruptArtifactError(f"{path}: non-positive or non-finite scores")
    if n_dropped and dropped.max() >= rows:
        raise CorruptArtifactError(f"{path}: dropped-row ids out of range")

    problems = mapping_mismatches(provenance, source_vocab, target_vocab)
    if problems:
        if not force:
            raise ProvenanceMismatchError(f"{path}: " + "; ".join(problems))
        logger.warning(f"Loading {path} despite provenance mismatch: {'; '.join(problems)}")

    counts = np.bincount(i, minlength=rows)
    row_kind = np.where(counts > 0, RowKind.ALIGNED, RowKind.DROPPED_EMPTY).astype(np.uint8)
    row_kind[dropped] = RowKind.DROPPED_VARIANCE
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return SparseMapping.from_arrays(rows, cols, indptr, j, entries["score"], row_kind, provenance)


def mapping_mismatches(
    provenance: MappingProvenance,
    source_vocab: Optional[Vocabulary] = None,
    target_vocab: Optional[Vocabulary] = None,
    noise: Optional[NoiseConfig] = None,
) -> List[str]:
    """Human-readable differences between a mapping's provenance and the session's inputs."""
    problems = []
    if source_vocab is not None and provenance.source_digest != source_vocab.digest():
        problems.append("source vocabulary digest differs")
    if target_vocab is not None and provenance.target_digest != target_vocab.digest():
        problems.append("target vocabulary digest differs")
    if noise is not None and provenance.noise != noise:
        diffs = [
            f"{name}: mapping {getattr(provenance.noise, name)!r} vs session {getattr(noise, name)!r}"
            for name in NoiseConfig.model_fields
            if getattr(provenance.noise, name) != getattr(noise, name)
        ]
        problems.append("noise settings differ (" + ", ".join(diffs) + ")")
    return problems

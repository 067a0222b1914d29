"""
Supervised linear mapping of one embedding space into another.

The learner follows the whitening -> orthogonal mapping -> re-weighting ->
de-whitening chain, using the overlap dictionary as supervision, and returns
one composed matrix ``U = W_X . U_svd . S^s . V^T . W_Z^-1`` that maps source
rows into the target space. With whitening off and ``reweight=0`` this is the
orthogonal Procrustes solution.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .embed_store import EmbeddingSet
from .errors import (
    ArtifactIOError,
    CorruptArtifactError,
    DictionaryTooSmallError,
    DimensionMismatchError,
    NonConvergenceError,
)
from .overlap import OverlapDictionary

logger = logging.getLogger(__name__)

TRANSFORM_MAGIC = b"EVAT"
TRANSFORM_VERSION = 1
_HEADER = struct.Struct("<4sIIIBBdd32sB")
_TARGET_SHAPE = struct.Struct("<II")


class TransformConfig(BaseModel):
    """Settings of the mapping pipeline; defaults follow the usual supervised recipe."""

    model_config = ConfigDict(frozen=True)

    whiten: bool = Field(default=True, description="Whiten both sides before the orthogonal step")
    reweight: float = Field(default=0.5, ge=0.0, description="Exponent s applied to the singular values on the source side")
    dewhiten: bool = Field(default=True, description="Map back into the target's original space")
    eig_floor: float = Field(default=1e-9, gt=0.0, description="Eigenvalue floor for inverse square roots")

    @model_validator(mode="before")
    @classmethod
    def _orthogonal_without_whitening(cls, data):
        # without whitening the map stays orthogonal unless reweight is given
        if isinstance(data, dict) and data.get("whiten") is False and "reweight" not in data:
            return {**data, "reweight": 0.0}
        return data


@dataclass(frozen=True)
class LinearTransform:
    """A learned d_Q x d_P matrix plus the settings it was learned with."""

    matrix: np.ndarray
    meta: TransformConfig = TransformConfig()
    target_matrix: Optional[np.ndarray] = None
    inputs_digest: bytes = bytes(32)

    def __post_init__(self):
        for name in ("matrix", "target_matrix"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.array(value, dtype=np.float64, copy=True)
            if value.ndim != 2 or not np.all(np.isfinite(value)):
                raise NonConvergenceError(f"Transform {name} must be a finite 2-D matrix")
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def identity(cls, dim: int) -> "LinearTransform":
        return cls(np.eye(dim), TransformConfig(whiten=False, reweight=0.0))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape


def _inverse_sqrt(cov: np.ndarray, floor: float, side: str) -> Tuple[np.ndarray, np.ndarray]:
    """Return (cov^-1/2, cov^1/2) from a symmetric eigendecomposition."""
    try:
        values, vectors = scipy.linalg.eigh(cov)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NonConvergenceError(f"Eigendecomposition of the {side} covariance failed: {e}")
    floored = int(np.sum(values < floor))
    if floored:
        logger.warning(f"{side} covariance is rank-deficient: {floored} eigenvalue(s) floored to {floor}")
    values = np.maximum(values, floor)
    inv_sqrt = (vectors * values ** -0.5) @ vectors.T
    sqrt = (vectors * values ** 0.5) @ vectors.T
    return inv_sqrt, sqrt


def _aligned_rows(eq: EmbeddingSet, ep: EmbeddingSet, d: OverlapDictionary) -> Tuple[np.ndarray, np.ndarray]:
    if d.source_size != len(eq) or d.target_size != len(ep):
        raise DimensionMismatchError(
            f"Dictionary was built for {d.source_size} x {d.target_size} vocabularies, "
            f"embeddings have {len(eq)} x {len(ep)} rows"
        )
    # fixed pair order keeps accumulations identical under permutation
    pairs = sorted(d.pairs)
    src = np.fromiter((i for i, _ in pairs), dtype=np.int64, count=len(pairs))
    tgt = np.fromiter((j for _, j in pairs), dtype=np.int64, count=len(pairs))
    return eq.matrix[src], ep.matrix[tgt]


def learn_transform(
    eq: EmbeddingSet,
    ep: EmbeddingSet,
    d: OverlapDictionary,
    cfg: TransformConfig = TransformConfig(),
    inputs_digest: bytes = bytes(32),
) -> LinearTransform:
    """
    Learn the matrix mapping ``eq`` rows onto their dictionary partners in ``ep``.

    Args:
        eq: Source (non-pivot) embeddings, preprocessed.
        ep: Target (pivot) embeddings, preprocessed.
        d: Overlap dictionary between the two vocabularies.
        cfg: Which pipeline stages to run.
        inputs_digest: Provenance digest stored with the transform.

    Returns:
        The composed transform.
    """
    if len(d) < 2:
        raise DictionaryTooSmallError(f"Need at least 2 dictionary pairs, got {len(d)}")
    if len(d) < max(eq.dim, ep.dim):
        logger.warning(
            f"Dictionary has {len(d)} pairs, fewer than the embedding dimension "
            f"({eq.dim}/{ep.dim}); the mapping is under-determined"
        )
    if not (eq.preprocessed and ep.preprocessed):
        logger.warning("Learning a transform from embeddings that were not preprocessed")

    x, z = _aligned_rows(eq, ep, d)
    if cfg.whiten:
        wx, _ = _inverse_sqrt(x.T @ x, cfg.eig_floor, "source")
        wz, wz_inv = _inverse_sqrt(z.T @ z, cfg.eig_floor, "target")
    else:
        wx, wz, wz_inv = np.eye(eq.dim), np.eye(ep.dim), np.eye(ep.dim)

    try:
        u, s, vt = scipy.linalg.svd((x @ wx).T @ (z @ wz), full_matrices=False)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NonConvergenceError(f"SVD of the cross-covariance failed: {e}")

    source_side = wx @ u * s ** cfg.reweight
    if cfg.dewhiten or not cfg.whiten:
        return LinearTransform(source_side @ vt @ wz_inv, cfg, None, inputs_digest)
    # without de-whitening both sides live in the shared whitened space
    return LinearTransform(source_side, cfg, wz @ vt.T, inputs_digest)


def objective(eq: EmbeddingSet, ep: EmbeddingSet, d: OverlapDictionary, matrix: np.ndarray) -> float:
    """Sum of squared residuals ||E^Q_i U - E^P_j||^2 over dictionary pairs."""
    x, z = _aligned_rows(eq, ep, d)
    return float(np.sum((x @ matrix - z) ** 2))


def apply_transform(e: EmbeddingSet, t: LinearTransform) -> EmbeddingSet:
    """Right-multiply the embedding matrix by the transform."""
    if e.dim != t.matrix.shape[0]:
        raise DimensionMismatchError(f"Embeddings have dim {e.dim}, transform expects {t.matrix.shape[0]}")
    return e.with_matrix(e.matrix @ t.matrix, mapped=True)


def apply_target_side(e: EmbeddingSet, t: LinearTransform) -> EmbeddingSet:
    """Bring the target set into the shared space when the transform was learned without de-whitening."""
    if t.target_matrix is None:
        return e
    if e.dim != t.target_matrix.shape[0]:
        raise DimensionMismatchError(
            f"Target embeddings have dim {e.dim}, transform expects {t.target_matrix.shape[0]}"
        )
    return e.with_matrix(e.matrix @ t.target_matrix, mapped=True)


def save_transform(t: LinearTransform, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = t.matrix.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(
            TRANSFORM_MAGIC, TRANSFORM_VERSION, rows, cols,
            int(t.meta.whiten), int(t.meta.dewhiten), t.meta.reweight, t.meta.eig_floor,
            t.inputs_digest, int(t.target_matrix is not None),
        ))
        if t.target_matrix is not None:
            f.write(_TARGET_SHAPE.pack(*t.target_matrix.shape))
        f.write(np.ascontiguousarray(t.matrix, dtype="<f8").tobytes())
        if t.target_matrix is not None:
            f.write(np.ascontiguousarray(t.target_matrix, dtype="<f8").tobytes())


def read_transform_digest(path: Union[str, Path]) -> Optional[bytes]:
    """Inputs digest stored in a transform file, or None when unreadable."""
    try:
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
    except OSError:
        return None
    if len(head) != _HEADER.size or head[:4] != TRANSFORM_MAGIC:
        return None
    return _HEADER.unpack(head)[8]


def load_transform(path: Union[str, Path]) -> LinearTransform:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactIOError(f"Transform file {path} not found")
    if len(data) < _HEADER.size:
        raise CorruptArtifactError(f"{path}: truncated transform header")
    magic, version, rows, cols, whiten, dewhiten, reweight, floor, digest, has_target = _HEADER.unpack_from(data)
    if magic != TRANSFORM_MAGIC or version != TRANSFORM_VERSION:
        raise CorruptArtifactError(f"{path}: not a version {TRANSFORM_VERSION} transform file")

    offset = _HEADER.size
    target_shape = (0, 0)
    if has_target:
        if len(data) < offset + _TARGET_SHAPE.size:
            raise CorruptArtifactError(f"{path}: truncated transform header")
        target_shape = _TARGET_SHAPE.unpack_from(data, offset)
        offset += _TARGET_SHAPE.size
    expected = 8 * (rows * cols + target_shape[0] * target_shape[1])
    if len(data) - offset != expected:
        raise CorruptArtifactError(f"{path}: expected {expected} bytes of matrix data, found {len(data) - offset}")

    matrix = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
    target = None
    if has_target:
        offset += 8 * rows * cols
        count = target_shape[0] * target_shape[1]
        target = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(target_shape)
    meta = TransformConfig(whiten=bool(whiten), dewhiten=bool(dewhiten), reweight=reweight, eig_floor=floor)
    return LinearTransform(matrix, meta, target, digest)

"""
Vocabularies and token-embedding matrices: loading, validation,
preprocessing and persistence.

Two on-disk formats are supported:

- ``word2vec-text``: a "<count> <dim>" header line, then one
  "<token> <v1> ... <vd>" line per token, UTF-8, single-space separated.
- ``binary-native``: magic ``EVAE``, u32 version, u64 vocabulary size, u32 dim,
  length-prefixed UTF-8 tokens, then row-major little-endian float32 values.

Values are parsed as float32 (the element type of both formats) and held as
float64 in memory, so a binary save/load cycle is bit-exact.
"""

import hashlib
import json
import logging
import struct
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Tuple, Union

import numpy as np

from .errors import ArtifactIOError, EmbeddingFormatError

logger = logging.getLogger(__name__)

EmbeddingFormat = Literal["word2vec-text", "binary-native"]
PathLike = Union[str, Path]

EMBEDDING_MAGIC = b"EVAE"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIQI")
_LENGTH = struct.Struct("<I")

SPACE_MARKER = "▁"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token surface strings with their dense 0-based ids."""

    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(repr=False, compare=False)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], normalize_unicode: bool = False) -> "Vocabulary":
        items = [unicodedata.normalize("NFC", t) if normalize_unicode else t for t in tokens]
        index: Dict[str, int] = {}
        for i, token in enumerate(items):
            if token in index:
                raise EmbeddingFormatError(
                    f"Duplicate token {token!r} at positions {index[token]} and {i}"
                )
            index[token] = i
        if len(items) < 2:
            raise EmbeddingFormatError(f"Vocabulary needs at least 2 tokens, got {len(items)}")
        return cls(tuple(items), index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index[token]

    def digest(self) -> bytes:
        """SHA-256 over the length-prefixed UTF-8 tokens, in order."""
        h = hashlib.sha256()
        for token in self.tokens:
            raw = token.encode("utf-8")
            h.update(_LENGTH.pack(len(raw)))
            h.update(raw)
        return h.digest()


@dataclass(frozen=True)
class EmbeddingSet:
    """A vocabulary plus its |V| x d embedding matrix (read-only)."""

    vocab: Vocabulary
    matrix: np.ndarray
    preprocessed: bool = False
    mapped: bool = False

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        if matrix.ndim != 2:
            raise EmbeddingFormatError(f"Embedding matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[0] != len(self.vocab):
            raise EmbeddingFormatError(
                f"Matrix has {matrix.shape[0]} rows but vocabulary has {len(self.vocab)} tokens"
            )
        if matrix.shape[1] < 1:
            raise EmbeddingFormatError("Embedding dimension must be positive")
        if not np.all(np.isfinite(matrix)):
            bad = int(np.argwhere(~np.isfinite(matrix))[0][0])
            raise EmbeddingFormatError(f"Non-finite value in row {bad} ({self.vocab.tokens[bad]!r})")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.vocab)

    def with_matrix(self, matrix: np.ndarray, **flags) -> "EmbeddingSet":
        return replace(self, matrix=matrix, **flags)

    def digest(self) -> bytes:
        h = hashlib.sha256(self.vocab.digest())
        h.update(struct.pack("<QQ??", *self.matrix.shape, self.preprocessed, self.mapped))
        h.update(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        return h.digest()


def load_vocabulary(path: PathLike, normalize_unicode: bool = False) -> Vocabulary:
    """Read a vocabulary stored as a JSON array of token strings."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            tokens = json.load(f)
    except FileNotFoundError:
        raise ArtifactIOError(f"Vocabulary file {path} not found")
    except json.JSONDecodeError as e:
        raise EmbeddingFormatError(f"{path}: not a JSON token list: {e}")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise EmbeddingFormatError(f"{path}: expected a JSON array of strings")
    return Vocabulary.from_tokens(tokens, normalize_unicode=normalize_unicode)


def load_embeddings(
    path: PathLike,
    format: EmbeddingFormat = "word2vec-text",
    normalize_unicode: bool = False,
) -> EmbeddingSet:
    """Load an embedding file; token order follows the file."""
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"Embedding file {path} not found")
    if format == "word2vec-text":
        return _load_text(path, normalize_unicode)
    if format == "binary-native":
        return _load_binary(path, normalize_unicode)
    raise EmbeddingFormatError(f"Unknown embedding format {format!r}")


def _load_text(path: Path, normalize_unicode: bool) -> EmbeddingSet:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2 or not all(part.isdigit() for part in header):
            raise EmbeddingFormatError(f"{path}:1: malformed header, expected '<count> <dim>'")
        count, dim = int(header[0]), int(header[1])
        if dim < 1:
            raise EmbeddingFormatError(f"{path}:1: dimension must be positive")

        tokens: List[str] = []
        seen: Dict[str, int] = {}
        rows = np.empty((count, dim), dtype=np.float32)
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\r\n").rstrip(" ")
            if not line:
                continue
            token, *values = line.split(" ")
            if normalize_unicode:
                token = unicodedata.normalize("NFC", token)
            if len(tokens) >= count:
                raise EmbeddingFormatError(f"{path}:{lineno}: more rows than the declared {count}")
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: dimension mismatch, expected {dim} values, got {len(values)}"
                )
            if token in seen:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: duplicate token {token!r} (first seen on line {seen[token]})"
                )
            try:
                row = np.asarray(values, dtype=np.float32)
            except ValueError as e:
                raise EmbeddingFormatError(f"{path}:{lineno}: {e}")
            if not np.all(np.isfinite(row)):
                raise EmbeddingFormatError(f"{path}:{lineno}: non-finite value for token {token!r}")
            seen[token] = lineno
            rows[len(tokens)] = row
            tokens.append(token)

    if len(tokens) != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} rows, found {len(tokens)}")
    logger.info(f"Loaded {count} x {dim} embeddings from {path}")
    return EmbeddingSet(Vocabulary.from_tokens(tokens), rows.astype(np.float64))


def _load_binary(path: Path, normalize_unicode: bool) -> EmbeddingSet:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")

    offset = _HEADER.size
    tokens: List[str] = []
    for _ in range(count):
        if offset + _LENGTH.size > len(data):
            raise EmbeddingFormatError(f"{path}: truncated token table")
        (length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        if offset + length > len(data):
            raise EmbeddingFormatError(f"{path}: truncated token table")
        try:
            tokens.append(data[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise EmbeddingFormatError(f"{path}: token {len(tokens)} is not UTF-8: {e}")
        offset += length

    expected = count * dim * 4
    if len(data) - offset != expected:
        raise EmbeddingFormatError(
            f"{path}: expected {expected} bytes of matrix data, found {len(data) - offset}"
        )
    matrix = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    vocab = Vocabulary.from_tokens(tokens, normalize_unicode=normalize_unicode)
    return EmbeddingSet(vocab, matrix.astype(np.float64))


def save_embeddings(e: EmbeddingSet, path: PathLike, format: EmbeddingFormat = "binary-native") -> None:
    """Write an embedding set; float64 values are narrowed to float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    narrowed = e.matrix.astype(np.float32)
    if not np.array_equal(narrowed.astype(np.float64), e.matrix):
        logger.warning(f"Saving {path}: values are not float32-exact, precision will be lost")

    if format == "word2vec-text":
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{len(e)} {e.dim}\n")
            for token, row in zip(e.vocab.tokens, narrowed):
                if " " in token or "\n" in token:
                    raise EmbeddingFormatError(f"Token {token!r} cannot be written in word2vec-text format")
                f.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")
        return
    if format != "binary-native":
        raise EmbeddingFormatError(f"Unknown embedding format {format!r}")

    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, len(e), e.dim))
        for token in e.vocab.tokens:
            raw = token.encode("utf-8")
            f.write(_LENGTH.pack(len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(narrowed, dtype="<f4").tobytes())


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    nonzero = norms > 0
    m[nonzero] /= norms[nonzero, None]
    return nonzero


def preprocess(e: EmbeddingSet) -> Tuple[EmbeddingSet, List[int]]:
    """
    Length-normalize, mean-center, then length-normalize again.

    All-zero rows stay zero, are left out of the column mean and are returned
    (together with rows that vanish after centering) as the warning list.
    An already preprocessed set is returned unchanged.

    Returns:
        The preprocessed set and the ids of the zero rows.
    """
    if e.preprocessed:
        logger.info("Embeddings already preprocessed, leaving them unchanged")
        return e, []

    m = np.array(e.matrix, dtype=np.float64)
    nonzero = _unit_rows(m)
    if nonzero.any():
        m[nonzero] -= m[nonzero].mean(axis=0)
    nonzero = _unit_rows(m)
    m[~nonzero] = 0.0

    zero_rows = [int(i) for i in np.flatnonzero(~nonzero)]
    if zero_rows:
        shown = ", ".join(repr(e.vocab.tokens[i]) for i in zero_rows[:5])
        logger.warning(f"{len(zero_rows)} zero embedding row(s) kept as zero: {shown}")
    return e.with_matrix(m, preprocessed=True), zero_rows

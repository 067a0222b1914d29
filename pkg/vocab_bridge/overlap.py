"""
Supervision dictionary of tokens shared by two vocabularies.
"""

from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Tuple

import numpy as np

from .embed_store import SPACE_MARKER, Vocabulary


@dataclass(frozen=True)
class OverlapDictionary:
    """One-to-one (source id, target id) pairs of identical surface strings."""

    pairs: Tuple[Tuple[int, int], ...]
    source_size: int
    target_size: int

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def source_ids(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=np.int64)

    @property
    def target_ids(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=np.int64)

    def subset(self, indices) -> "OverlapDictionary":
        """Dictionary restricted to the given pair positions (kept in ascending source order)."""
        chosen = sorted(self.pairs[int(k)] for k in indices)
        return OverlapDictionary(tuple(chosen), self.source_size, self.target_size)

    def transpose(self) -> "OverlapDictionary":
        return OverlapDictionary(
            tuple(sorted((j, i) for i, j in self.pairs)), self.target_size, self.source_size
        )


def _surface(token: str, marker_as_space: bool) -> str:
    return token.replace(SPACE_MARKER, " ") if marker_as_space else token


def build_overlap(vq: Vocabulary, vp: Vocabulary, marker_as_space: bool = False) -> OverlapDictionary:
    """
    Pair every token of ``vq`` with the byte-identical token of ``vp``.

    Args:
        vq: Source (non-pivot) vocabulary.
        vp: Target (pivot) vocabulary.
        marker_as_space: Compare with U+2581 rewritten to a plain space.

    Returns:
        The dictionary, in ascending source id order.
    """
    if marker_as_space:
        target_index: Dict[str, int] = {}
        for j, token in enumerate(vp.tokens):
            # first spelling wins when two tokens collapse to the same surface
            target_index.setdefault(_surface(token, True), j)
    else:
        target_index = vp.index

    pairs: List[Tuple[int, int]] = []
    used = set()
    for i, token in enumerate(vq.tokens):
        j = target_index.get(_surface(token, marker_as_space))
        if j is not None and j not in used:
            used.add(j)
            pairs.append((i, j))
    return OverlapDictionary(tuple(pairs), len(vq), len(vp))


def overlap_rate(d: OverlapDictionary, relative_to: Literal["source", "target"] = "target") -> float:
    """Number of pairs divided by the chosen vocabulary size."""
    if relative_to == "source":
        return len(d.pairs) / d.source_size
    if relative_to == "target":
        return len(d.pairs) / d.target_size
    raise ValueError(f"relative_to must be 'source' or 'target', got {relative_to!r}")


def overlap_matrix(vocabs: Mapping[str, Vocabulary]) -> Tuple[List[str], np.ndarray]:
    """
    Pairwise shared-token rates between several vocabularies.

    Models are ordered by ascending vocabulary size (ties by name); cell
    ``[a, b]`` is the share of model ``a``'s vocabulary also found in model ``b``.
    """
    names = sorted(vocabs, key=lambda name: (len(vocabs[name]), name))
    rates = np.eye(len(names))
    for a, row_name in enumerate(names):
        for b, col_name in enumerate(names):
            if a != b:
                d = build_overlap(vocabs[row_name], vocabs[col_name])
                rates[a, b] = overlap_rate(d, "source")
    return names, rates


def overlap_report(d: OverlapDictionary, vq: Vocabulary, include_pairs: bool = False) -> Dict:
    report = {
        "pairs": len(d.pairs),
        "rate_source": overlap_rate(d, "source"),
        "rate_target": overlap_rate(d, "target"),
        "source_size": d.source_size,
        "target_size": d.target_size,
    }
    if include_pairs:
        report["pair_list"] = [[i, j, vq.tokens[i]] for i, j in d.pairs]
    return report

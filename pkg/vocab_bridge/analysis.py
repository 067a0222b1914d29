"""
Diagnostics over decode traces and mappings: token spelling diversity, the
similarity-interval histogram, and small accuracy sweeps.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .ensemble_engine import STATUS_OK, DecodeState, EnsembleSpec, decode, greedy_decode
from .errors import InvalidArgumentError
from .map_builder import SparseMapping

logger = logging.getLogger(__name__)

DEFAULT_N_VALUES = (3, 5, 10, 20, 40)
DEFAULT_EDGES = (0.1, 0.4, 0.6, 1.0)


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance over code points."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ca != cb),
            ))
        previous = current
    return previous[-1]


# -- diversity ----------------------------------------------------------------

@dataclass
class DiversityReport:
    per_n: List[Tuple[int, float]]
    sample_count: int
    per_model: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict)
    truncated: Dict[int, int] = field(default_factory=dict)

    def mean_at(self, n: int, model: Optional[str] = None) -> float:
        rows = self.per_n if model is None else self.per_model[model]
        return dict(rows)[n]

    def to_dict(self) -> Dict:
        return {
            "sample_count": self.sample_count,
            "per_n": [[n, mean] for n, mean in self.per_n],
            "per_model": {name: [[n, mean] for n, mean in rows] for name, rows in self.per_model.items()},
            "truncated": {str(n): count for n, count in self.truncated.items()},
        }


class DiversityTally:
    """Running sums of per-position mean edit distances, so logs can be added in any chunks."""

    def __init__(self, n_values: Sequence[int] = DEFAULT_N_VALUES):
        n_values = sorted(set(n_values))
        if not n_values or n_values[0] < 2:
            raise InvalidArgumentError(f"diversity needs n >= 2, got {n_values}")
        self.n_values = n_values
        self.sums: Dict[Tuple[str, int], float] = {}
        self.counts: Dict[Tuple[str, int], int] = {}
        self.truncated: Dict[int, int] = {n: 0 for n in n_values}
        self.positions = 0

    def add_top_list(self, model: str, tokens: Sequence[str]) -> None:
        if not tokens:
            return
        self.positions += 1
        distances = [edit_distance(t, tokens[0]) for t in tokens[1:]]
        for n in self.n_values:
            available = distances[:n - 1]
            if len(available) < n - 1:
                self.truncated[n] += 1
            if not available:
                continue
            key = (model, n)
            self.sums[key] = self.sums.get(key, 0.0) + sum(available) / len(available)
            self.counts[key] = self.counts.get(key, 0) + 1

    def add_state(self, state: DecodeState) -> None:
        for record in state.step_log:
            for model, step in record.models.items():
                if step.status == STATUS_OK:
                    self.add_top_list(model, [token for token, _ in step.top])

    def report(self) -> DiversityReport:
        models = sorted({model for model, _ in self.counts})
        per_model = {}
        for model in models:
            per_model[model] = [
                (n, self.sums[(model, n)] / self.counts[(model, n)])
                for n in self.n_values if self.counts.get((model, n))
            ]
        per_n = []
        for n in self.n_values:
            total = sum(self.counts.get((m, n), 0) for m in models)
            if total:
                per_n.append((n, sum(self.sums.get((m, n), 0.0) for m in models) / total))
        return DiversityReport(per_n, self.positions, per_model, dict(self.truncated))


def diversity(states: Iterable[DecodeState], n_values: Sequence[int] = DEFAULT_N_VALUES) -> DiversityReport:
    """
    Mean edit distance between ranks 2..n and the top-1 token of each logged
    native top list, pooled over positions and models, and per model.

    Positions whose list is shorter than n contribute the ranks they have and
    are counted in ``truncated``.
    """
    tally = DiversityTally(n_values)
    for state in states:
        tally.add_state(state)
    return tally.report()


def write_diversity_csv(report: DiversityReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "n", "mean_edit_distance"])
        for n, mean in report.per_n:
            writer.writerow(["*", n, f"{mean:.6f}"])
        for model, rows in report.per_model.items():
            for n, mean in rows:
                writer.writerow([model, n, f"{mean:.6f}"])


# -- similarity histogram -------------------------------------------------------

@dataclass
class SimilarityHistogram:
    edges: Tuple[float, ...]
    counts: List[int]
    below: int
    above: int
    dropped_empty: int
    dropped_variance: int
    aligned_fraction: float

    @property
    def total(self) -> int:
        return sum(self.counts) + self.below + self.above

    def labels(self) -> List[str]:
        last = len(self.edges) - 2
        return [
            f"[{lo}, {hi}{']' if k == last else ')'}"
            for k, (lo, hi) in enumerate(zip(self.edges[:-1], self.edges[1:]))
        ]

    def to_dict(self) -> Dict:
        return {
            "bins": [{"interval": label, "count": count} for label, count in zip(self.labels(), self.counts)],
            "below": self.below,
            "above": self.above,
            "dropped_empty": self.dropped_empty,
            "dropped_variance": self.dropped_variance,
            "aligned_fraction": self.aligned_fraction,
        }


def similarity_bins(m: SparseMapping, edges: Sequence[float] = DEFAULT_EDGES) -> SimilarityHistogram:
    """
    Count retained pre-normalization scores per interval.

    Intervals are half-open except the last, which is closed; scores outside
    the edges go to ``below`` / ``above`` so the total equals ``m.nnz``.
    """
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or any(hi <= lo for lo, hi in zip(edges[:-1], edges[1:])):
        raise InvalidArgumentError(f"edges must be strictly ascending with at least 2 values, got {edges}")
    scores = m.scores.data
    below = int(np.sum(scores < edges[0]))
    above = int(np.sum(scores > edges[-1]))
    inside = scores[(scores >= edges[0]) & (scores <= edges[-1])]
    bins = np.searchsorted(edges, inside, side="right") - 1
    # the top edge belongs to the last interval
    bins = np.minimum(bins, len(edges) - 2)
    counts = np.bincount(bins, minlength=len(edges) - 1).tolist()
    kinds = m.kind_counts()
    return SimilarityHistogram(
        edges, counts, below, above, kinds["dropped-empty"], kinds["dropped-variance"], m.aligned_fraction
    )


# -- accuracy sweeps ------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    label: str
    exact_match: float


def exact_match(outputs: Sequence[str], references: Sequence[str]) -> float:
    if len(outputs) != len(references):
        raise InvalidArgumentError(f"{len(outputs)} outputs vs {len(references)} references")
    if not outputs:
        return 0.0
    return sum(o.strip() == r.strip() for o, r in zip(outputs, references)) / len(outputs)


def _ensemble_accuracy(spec: EnsembleSpec, prompts: Sequence[str], references: Sequence[str]) -> float:
    return exact_match([decode(spec, prompt)[0] for prompt in prompts], references)


def filter_sweep(
    spec: EnsembleSpec,
    prompts: Sequence[str],
    references: Sequence[str],
    n_values: Sequence[int] = (1, 3, 10, 40),
) -> List[SweepPoint]:
    """Exact match with filtering off and at each filter width n."""
    points = [SweepPoint("off", _ensemble_accuracy(replace(spec, use_filter=False), prompts, references))]
    for n in n_values:
        accuracy = _ensemble_accuracy(replace(spec, use_filter=True, n_filter=n), prompts, references)
        points.append(SweepPoint(f"n={n}", accuracy))
        logger.info(f"Filter sweep n={n}: exact match {accuracy:.3f}")
    return points


def ensemble_size_curve(spec: EnsembleSpec, prompts: Sequence[str], references: Sequence[str]) -> List[SweepPoint]:
    """
    Exact match as models join one at a time, pivot first, then the others in
    spec order. The first point is the pivot decoding alone.
    """
    pivot = spec.pivot_client
    others = [c for c in spec.clients if c.name != spec.pivot]
    alone = [greedy_decode(pivot, p, spec.max_len, spec.stop_tokens) for p in prompts]
    points = [SweepPoint(pivot.name, exact_match(alone, references))]
    for size in range(1, len(others) + 1):
        members = [pivot] + others[:size]
        subset = replace(
            spec,
            clients=members,
            mappings={c.name: spec.mappings[c.name] for c in members[1:]},
        )
        points.append(SweepPoint("+".join(c.name for c in members), _ensemble_accuracy(subset, prompts, references)))
    return points


def mapping_row_summary(m: SparseMapping) -> Dict[str, int]:
    """Row counts per kind plus the number of stored entries."""
    summary = m.kind_counts()
    summary["entries"] = m.nnz
    summary["rows"] = m.rows
    return summary

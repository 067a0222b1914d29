"""
End-to-end wiring of the stages: align -> build-map -> decode -> stats.

Every artifact records the digest of the inputs it was derived from. A stage
whose artifact already carries the current digest is skipped, so a rerun with
unchanged inputs recomputes nothing.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .analysis import diversity, similarity_bins, write_diversity_csv
from .clients import PATH_PARAMS_KINDS, build_client
from .config import SessionConfig
from .embed_store import EmbeddingSet, Vocabulary, load_embeddings, load_vocabulary, preprocess
from .ensemble_engine import (
    DecodeState,
    EnsembleSpec,
    ModelClient,
    decode,
    load_trace,
    read_trace_digest,
    select_pivot,
    write_trace,
)
from .errors import ArtifactIOError, EmbeddingFormatError, InvalidArgumentError
from .map_builder import (
    MappingProvenance,
    SparseMapping,
    build_mapping,
    load_mapping,
    read_mapping_provenance,
    save_mapping,
)
from .overlap import build_overlap, overlap_report
from .similarity import csls
from .transform_learner import (
    apply_target_side,
    apply_transform,
    learn_transform,
    load_transform,
    read_transform_digest,
    save_transform,
)

logger = logging.getLogger(__name__)

STAGES = ("align", "build-map", "decode", "stats")
_UPSTREAM = {"align": (), "build-map": ("align",), "decode": ("build-map",), "stats": ("decode",)}


def _digest(*parts) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return h.digest()


def _file_digest(path: Path) -> bytes:
    try:
        return hashlib.sha256(path.read_bytes()).digest()
    except FileNotFoundError:
        raise ArtifactIOError(f"Input file {path} not found")


def align_to_vocabulary(e: EmbeddingSet, vocab: Vocabulary) -> EmbeddingSet:
    """Reorder embedding rows into the vocabulary's id order."""
    if e.vocab.tokens == vocab.tokens:
        return e
    missing = [t for t in vocab.tokens if t not in e.vocab]
    if missing:
        raise EmbeddingFormatError(
            f"{len(missing)} vocabulary token(s) have no embedding, e.g. {missing[:3]!r}"
        )
    order = np.array([e.vocab.id_of(t) for t in vocab.tokens], dtype=np.int64)
    return EmbeddingSet(vocab, e.matrix[order])


def expand_stages(stages: Iterable[str]) -> List[str]:
    """Requested stages plus everything upstream of them, in pipeline order."""
    wanted = set()
    pending = list(stages)
    while pending:
        stage = pending.pop()
        if stage not in _UPSTREAM:
            raise InvalidArgumentError(f"Unknown stage {stage!r}, expected one of {STAGES}")
        if stage not in wanted:
            wanted.add(stage)
            pending.extend(_UPSTREAM[stage])
    return [s for s in STAGES if s in wanted]


@dataclass
class StageResult:
    stage: str
    artifacts: List[str] = field(default_factory=list)
    recomputed: int = 0
    reused: int = 0


@dataclass
class PipelineReport:
    stages: List[StageResult]

    @property
    def recomputed(self) -> int:
        return sum(s.recomputed for s in self.stages)

    def to_dict(self) -> Dict:
        return {
            "recomputed": self.recomputed,
            "stages": [
                {"stage": s.stage, "artifacts": s.artifacts, "recomputed": s.recomputed, "reused": s.reused}
                for s in self.stages
            ],
        }


class Session:
    """Models of one session config; files are loaded on first use."""

    def __init__(
        self,
        cfg: SessionConfig,
        threads: Optional[int] = None,
        force: bool = False,
        accept_mismatch: bool = False,
    ):
        self.cfg = cfg
        self.threads = threads or cfg.threads
        self.force = force
        # force also accepts provenance mismatches
        self.accept_mismatch = force or accept_mismatch
        self._embeddings: Dict[str, EmbeddingSet] = {}
        self._preprocessed: Dict[str, EmbeddingSet] = {}
        self._clients: Dict[str, ModelClient] = {}
        self._pivot: Optional[str] = None

    # -- models

    def embeddings(self, name: str) -> EmbeddingSet:
        if name not in self._embeddings:
            entry = self.cfg.model(name)
            e = load_embeddings(entry.embeddings, entry.embedding_format, entry.normalize_unicode)
            if entry.vocabulary is not None:
                e = align_to_vocabulary(e, load_vocabulary(entry.vocabulary, entry.normalize_unicode))
            self._embeddings[name] = e
        return self._embeddings[name]

    def preprocessed(self, name: str) -> EmbeddingSet:
        if name not in self._preprocessed:
            e, zero_rows = preprocess(self.embeddings(name))
            if zero_rows:
                logger.warning(f"{name}: {len(zero_rows)} zero embedding row(s) will never be aligned")
            self._preprocessed[name] = e
        return self._preprocessed[name]

    def vocabulary(self, name: str) -> Vocabulary:
        return self.embeddings(name).vocab

    @property
    def pivot(self) -> str:
        if self._pivot is None:
            if self.cfg.pivot == "auto":
                self._pivot = select_pivot({name: len(self.vocabulary(name)) for name in self.cfg.names})
                logger.info(f"Pivot model: {self._pivot} (largest vocabulary)")
            else:
                self._pivot = self.cfg.pivot
        return self._pivot

    @property
    def sources(self) -> List[str]:
        return [name for name in self.cfg.names if name != self.pivot]

    def client(self, name: str) -> ModelClient:
        if name not in self._clients:
            entry = self.cfg.model(name)
            self._clients[name] = build_client(entry.client.kind, name, self.vocabulary(name), entry.client.params)
        return self._clients[name]

    def close(self) -> None:
        for client in self._clients.values():
            client.close()
        self._clients.clear()

    # -- artifact paths

    def transform_path(self, source: str) -> Path:
        return self.cfg.work_dir / "transforms" / f"{source}__{self.pivot}.evat"

    def mapping_path(self, source: str) -> Path:
        return self.cfg.work_dir / "maps" / f"{source}__{self.pivot}.evam"

    @property
    def trace_path(self) -> Path:
        return self.cfg.work_dir / "traces" / "decode.jsonl"

    @property
    def stats_path(self) -> Path:
        return self.cfg.work_dir / "reports" / "stats.json"

    # -- input digests

    def transform_digest(self, source: str) -> bytes:
        return _digest(
            b"transform",
            self.embeddings(source).digest(),
            self.embeddings(self.pivot).digest(),
            self.cfg.transform.model_dump_json(),
            str(self.cfg.marker_as_space),
        )

    def mapping_digest(self, source: str) -> bytes:
        return _digest(
            b"mapping",
            self.transform_digest(source),
            self.cfg.noise.model_dump_json(),
            str(self.cfg.csls_k),
        )

    def client_digest(self, name: str) -> bytes:
        entry = self.cfg.model(name)
        parts = [entry.client.model_dump_json()]
        for key in PATH_PARAMS_KINDS.get(entry.client.kind, ()):
            value = entry.client.params.get(key)
            if value is not None:
                parts.append(_file_digest(Path(value)))
        return _digest(b"client", self.vocabulary(name).digest(), *parts)

    def decode_digest(self, prompts: Sequence[str]) -> str:
        parts = [self.pivot, self.cfg.decode.model_dump_json(exclude={"prompts", "prompt_file"})]
        for name in self.cfg.names:
            parts.append(self.client_digest(name))
            if name != self.pivot:
                parts.append(self.mapping_digest(name))
        parts.append(json.dumps(list(prompts), ensure_ascii=False))
        return _digest(b"decode", *parts).hex()


# -- stages ---------------------------------------------------------------------

def run_align(session: Session) -> StageResult:
    result = StageResult("align")
    pivot = session.pivot
    for source in session.sources:
        path = session.transform_path(source)
        digest = session.transform_digest(source)
        result.artifacts.append(str(path))
        if not session.force and read_transform_digest(path) == digest:
            logger.info(f"align {source} -> {pivot}: cached transform is current")
            result.reused += 1
            continue
        eq, ep = session.preprocessed(source), session.preprocessed(pivot)
        d = build_overlap(eq.vocab, ep.vocab, session.cfg.marker_as_space)
        report = overlap_report(d, eq.vocab)
        logger.info(
            f"align {source} -> {pivot}: {report['pairs']} shared tokens "
            f"({report['rate_source']:.1%} of source, {report['rate_target']:.1%} of pivot)"
        )
        save_transform(learn_transform(eq, ep, d, session.cfg.transform, digest), path)
        result.recomputed += 1
    return result


def mapping_for(session: Session, source: str) -> SparseMapping:
    """Learn the mapping for one source model from its saved transform."""
    pivot = session.pivot
    transform = load_transform(session.transform_path(source))
    mapped = apply_transform(session.preprocessed(source), transform)
    target = apply_target_side(session.preprocessed(pivot), transform)
    scores = csls(mapped, target, session.cfg.csls_k, session.cfg.block_size, session.threads)
    provenance = MappingProvenance(
        session.vocabulary(source).digest(),
        session.vocabulary(pivot).digest(),
        session.cfg.noise,
        session.mapping_digest(source),
        session.cfg.csls_k,
    )
    rows, cols = scores.shape
    return build_mapping(scores.blocks(), session.cfg.noise, rows, cols, provenance)


def run_build_map(session: Session) -> StageResult:
    result = StageResult("build-map")
    for source in session.sources:
        path = session.mapping_path(source)
        result.artifacts.append(str(path))
        provenance = read_mapping_provenance(path)
        if (
            not session.force
            and provenance is not None
            and provenance.inputs_digest == session.mapping_digest(source)
            and provenance.source_digest == session.vocabulary(source).digest()
            and provenance.target_digest == session.vocabulary(session.pivot).digest()
        ):
            logger.info(f"build-map {source} -> {session.pivot}: cached mapping is current")
            result.reused += 1
            continue
        save_mapping(mapping_for(session, source), path)
        result.recomputed += 1
    return result


def ensemble_spec(session: Session, **overrides) -> EnsembleSpec:
    """EnsembleSpec over every configured model with the saved mappings."""
    settings = session.cfg.decode
    mappings = {
        source: load_mapping(
            session.mapping_path(source),
            session.vocabulary(source),
            session.vocabulary(session.pivot),
            force=session.accept_mismatch,
        )
        for source in session.sources
    }
    params = dict(
        k_trunc=settings.k,
        n_filter=settings.n,
        max_len=settings.max_len,
        stop_tokens=tuple(settings.stop_tokens),
        use_filter=settings.use_filter,
        failure_policy=settings.failure_policy,
        max_workers=session.threads,
        trace_top=settings.trace_top,
    )
    params.update(overrides)
    return EnsembleSpec([session.client(name) for name in session.cfg.names], session.pivot, mappings, **params)


def decode_prompts(spec: EnsembleSpec, prompts: Sequence[str]) -> List[DecodeState]:
    states = []
    for index, prompt in enumerate(prompts):
        output, state = decode(spec, prompt)
        logger.info(f"Prompt {index}: {len(state.step_log)} step(s) -> {output!r}")
        states.append(state)
    return states


def run_decode(session: Session) -> StageResult:
    result = StageResult("decode", [str(session.trace_path)])
    prompts = session.cfg.prompts()
    if not prompts:
        raise InvalidArgumentError("No prompts configured: set decode.prompts or decode.prompt_file")
    digest = session.decode_digest(prompts)
    if not session.force and read_trace_digest(session.trace_path) == digest:
        logger.info("decode: cached trace is current")
        result.reused += 1
        return result
    write_trace(session.trace_path, decode_prompts(ensemble_spec(session), prompts), digest)
    result.recomputed += 1
    return result


def stats_report(
    states: Sequence[DecodeState],
    mappings: Dict[str, SparseMapping],
    n_values: Sequence[int],
    edges: Sequence[float],
) -> Dict:
    report = diversity(states, n_values)
    return {
        "diversity": report.to_dict(),
        "outputs": [state.generated for state in states],
        "fallback_steps": sum(r.fallback for s in states for r in s.step_log),
        "mappings": {name: similarity_bins(m, edges).to_dict() for name, m in mappings.items()},
    }


def run_stats(session: Session) -> StageResult:
    path = session.stats_path
    result = StageResult("stats", [str(path), str(path.with_name("diversity.csv"))])
    trace_digest = read_trace_digest(session.trace_path) or ""
    digest = _digest(
        b"stats",
        trace_digest,
        session.cfg.stats.model_dump_json(),
        *(session.mapping_digest(source) for source in session.sources),
    ).hex()
    if not session.force and path.exists():
        try:
            cached = json.loads(path.read_text(encoding="utf-8")).get("digest")
        except (OSError, json.JSONDecodeError):
            cached = None
        if cached == digest:
            logger.info("stats: cached report is current")
            result.reused += 1
            return result

    states = load_trace(session.trace_path)
    mappings = {
        source: load_mapping(session.mapping_path(source), force=session.force) for source in session.sources
    }
    report = stats_report(states, mappings, session.cfg.stats.n_values, session.cfg.stats.edges)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"digest": digest, **report}, indent=2), encoding="utf-8")
    write_diversity_csv(diversity(states, session.cfg.stats.n_values), path.with_name("diversity.csv"))
    result.recomputed += 1
    return result


_RUNNERS = {"align": run_align, "build-map": run_build_map, "decode": run_decode, "stats": run_stats}


def run_pipeline(
    cfg: SessionConfig,
    stages: Iterable[str] = STAGES,
    threads: Optional[int] = None,
    force: bool = False,
) -> PipelineReport:
    """
    Run the requested stages and whatever they depend on, reusing current artifacts.

    Args:
        cfg: Validated session config.
        stages: Any of ``align``, ``build-map``, ``decode``, ``stats``.
        threads: Worker threads for CSLS blocks and client queries.
        force: Recompute everything and accept provenance mismatches.
    """
    session = Session(cfg, threads, force)
    results = []
    try:
        for stage in expand_stages(stages):
            logger.info(f"Stage {stage}")
            results.append(_RUNNERS[stage](session))
    finally:
        session.close()
    report = PipelineReport(results)
    logger.info(f"Pipeline finished: {report.recomputed} artifact(s) recomputed")
    return report

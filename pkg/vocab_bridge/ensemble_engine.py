"""
Token-level ensemble decoding over models with different vocabularies.

Each step queries every model on the shared text prefix, truncates each native
distribution to its top-k, projects non-pivot distributions into the pivot
vocabulary through their SparseMapping, drops models whose top-1 token is not
in any other model's top-n, averages the survivors and emits the argmax.
"""

import json
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .embed_store import SPACE_MARKER, Vocabulary
from .errors import ClientError, DimensionMismatchError, InvalidArgumentError, ZeroMassError
from .map_builder import SparseMapping

logger = logging.getLogger(__name__)

Space = Literal["native", "pivot"]
FailurePolicy = Literal["drop", "abort"]

STATUS_OK = "ok"
STATUS_FAILED = "failed"
STATUS_ZERO_MASS = "zero-mass"


@dataclass(frozen=True)
class TokenDistribution:
    """Probability vector over one model's vocabulary at one decode step."""

    model_id: str
    probs: np.ndarray
    space: Space = "native"

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 1 or not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidArgumentError(f"{self.model_id}: probabilities must be a finite non-negative vector")
        total = probs.sum()
        if not 0 < total <= 1 + 1e-9:
            raise InvalidArgumentError(f"{self.model_id}: probabilities sum to {total}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_weights(cls, model_id: str, weights, space: Space = "native") -> "TokenDistribution":
        """Normalize non-negative weights into a distribution."""
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not total > 0:
            raise ZeroMassError(f"{model_id}: distribution has no probability mass")
        return cls(model_id, weights / total, space)

    def __len__(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def top(self, n: int) -> np.ndarray:
        """Ids of the n most probable tokens with positive probability (lowest id on ties)."""
        support = np.flatnonzero(self.probs > 0)
        order = np.argsort(-self.probs[support], kind="stable")
        return support[order[:n]]


class ModelClient(ABC):
    """
    A model backend. Clients see text only; each one segments the prefix with
    its own vocabulary.
    """

    def __init__(self, name: str, vocabulary: Vocabulary):
        self.name = name
        self._vocabulary = vocabulary
        self._longest = max(len(t) for t in vocabulary.tokens)
        self._uses_marker = any(SPACE_MARKER in t for t in vocabulary.tokens)

    @property
    def vocabulary(self) -> Vocabulary:
        return self._vocabulary

    @abstractmethod
    def next_distribution(self, text_prefix: str, step: int = 0) -> TokenDistribution:
        """
        Distribution over this client's vocabulary for the token following ``text_prefix``.

        Args:
            text_prefix: Prompt plus everything generated so far.
            step: Index of the decode step, starting at 0.
        """

    def tokenize(self, text: str) -> List[int]:
        """Greedy longest-match segmentation; characters no token covers are skipped."""
        if self._uses_marker:
            text = text.replace(" ", SPACE_MARKER)
        index = self._vocabulary.index
        ids: List[int] = []
        pos = 0
        while pos < len(text):
            for length in range(min(self._longest, len(text) - pos), 0, -1):
                token_id = index.get(text[pos:pos + length])
                if token_id is not None:
                    ids.append(token_id)
                    pos += length
                    break
            else:
                logger.debug(f"{self.name}: no token covers {text[pos]!r}, skipping it")
                pos += 1
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        text = "".join(self._vocabulary.tokens[i] for i in ids)
        return text.replace(SPACE_MARKER, " ")

    def close(self) -> None:
        pass

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(name={self.name!r}, vocab={len(self._vocabulary)})"


# -- per-step operations ------------------------------------------------------

def topk_truncate(q: TokenDistribution, k: int) -> TokenDistribution:
    """Keep the k most probable tokens (lowest id on ties) and renormalize."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if q.space != "native":
        raise InvalidArgumentError(f"{q.model_id}: top-k truncation applies to native distributions")
    if np.count_nonzero(q.probs) <= k:
        if abs(q.probs.sum() - 1.0) <= 1e-9:
            return q
        truncated = q.probs
    else:
        keep = q.top(k)
        truncated = np.zeros_like(q.probs)
        truncated[keep] = q.probs[keep]
    return TokenDistribution.from_weights(q.model_id, truncated, "native")


def project(q: TokenDistribution, w: SparseMapping) -> TokenDistribution:
    """
    Move a native distribution into the pivot vocabulary: ``p = q @ W``.

    Mass on dropped rows is lost; the result is renormalized.

    Raises:
        ZeroMassError: nothing in the support of ``q`` is mapped.
    """
    if q.space != "native":
        raise InvalidArgumentError(f"{q.model_id}: distribution is already in pivot space")
    if len(q) != w.rows:
        raise DimensionMismatchError(f"{q.model_id}: distribution has {len(q)} entries, mapping has {w.rows} rows")
    support = np.flatnonzero(q.probs)
    projected = w.weights[support].T @ q.probs[support]
    if not projected.sum() > 0:
        raise ZeroMassError(f"{q.model_id}: top-k support has no mapped tokens")
    return TokenDistribution.from_weights(q.model_id, projected, "pivot")


def filter_models(ps: Sequence[TokenDistribution], n: int) -> List[int]:
    """
    I(l) = 1 when model l's top-1 token is among the top-n tokens of at least
    one other model. A lone distribution is always kept.
    """
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    if len(ps) < 2:
        return [1] * len(ps)
    top1 = [p.argmax() for p in ps]
    top_n = [set(p.top(n).tolist()) for p in ps]
    verdicts = []
    for ell, token in enumerate(top1):
        others = set().union(*(top_n[o] for o in range(len(ps)) if o != ell))
        verdicts.append(int(token in others))
    return verdicts


def fuse(
    ps: Sequence[TokenDistribution],
    verdicts: Sequence[int],
    fallback: Optional[TokenDistribution] = None,
) -> Tuple[TokenDistribution, bool]:
    """
    Average the distributions whose verdict is 1.

    Returns:
        The fused distribution and whether the fallback was used (no survivors).
    """
    if not ps:
        raise ZeroMassError("No distributions to fuse")
    kept = [p.probs for p, keep in zip(ps, verdicts) if keep]
    if kept:
        return TokenDistribution("ensemble", np.mean(kept, axis=0), "pivot"), False
    if fallback is None:
        fallback = TokenDistribution("ensemble", np.mean([p.probs for p in ps], axis=0), "pivot")
    return TokenDistribution("ensemble", fallback.probs, "pivot"), True


def select_pivot(vocab_sizes: Mapping[str, int]) -> str:
    """The model with the largest vocabulary; ties go to the first name in sort order."""
    if not vocab_sizes:
        raise InvalidArgumentError("No models to choose a pivot from")
    return min(vocab_sizes, key=lambda name: (-vocab_sizes[name], name))


# -- decoding -----------------------------------------------------------------

@dataclass
class EnsembleSpec:
    """The models to ensemble, their mappings into the pivot, and decode settings."""

    clients: List[ModelClient]
    pivot: str
    mappings: Dict[str, SparseMapping] = field(default_factory=dict)
    k_trunc: int = 320
    n_filter: int = 40
    max_len: int = 64
    stop_tokens: Tuple[str, ...] = ("</s>",)
    use_filter: bool = True
    failure_policy: FailurePolicy = "drop"
    max_workers: int = 1
    trace_top: int = 40

    def __post_init__(self):
        names = [c.name for c in self.clients]
        if len(self.clients) < 2:
            raise InvalidArgumentError(f"An ensemble needs at least 2 models, got {len(self.clients)}")
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"Model names must be unique: {names}")
        if self.pivot not in names:
            raise InvalidArgumentError(f"Pivot {self.pivot!r} is not one of {names}")
        if self.k_trunc < 1 or self.n_filter < 1 or self.max_len < 0:
            raise InvalidArgumentError("k_trunc and n_filter must be >= 1 and max_len >= 0")
        pivot_size = len(self.pivot_client.vocabulary)
        for client in self.clients:
            if client.name == self.pivot:
                continue
            mapping = self.mappings.get(client.name)
            if mapping is None:
                raise InvalidArgumentError(f"No mapping for non-pivot model {client.name!r}")
            if mapping.shape != (len(client.vocabulary), pivot_size):
                raise DimensionMismatchError(
                    f"Mapping for {client.name!r} is {mapping.shape}, expected "
                    f"({len(client.vocabulary)}, {pivot_size})"
                )
        self.stop_tokens = tuple(self.stop_tokens)

    @property
    def pivot_client(self) -> ModelClient:
        return next(c for c in self.clients if c.name == self.pivot)

    @property
    def pivot_index(self) -> int:
        return next(i for i, c in enumerate(self.clients) if c.name == self.pivot)


@dataclass
class ModelStep:
    status: str
    top: List[Tuple[str, float]] = field(default_factory=list)
    pivot_top: List[Tuple[str, float]] = field(default_factory=list)
    kept: int = 0
    error: Optional[str] = None


@dataclass
class StepRecord:
    step: int
    models: Dict[str, ModelStep]
    fallback: bool
    token_id: int
    token: str
    stop: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "models": {
                name: {
                    "status": m.status,
                    "top": [[t, p] for t, p in m.top],
                    "pivot_top": [[t, p] for t, p in m.pivot_top],
                    "kept": m.kept,
                    "error": m.error,
                }
                for name, m in self.models.items()
            },
            "fallback": self.fallback,
            "token_id": self.token_id,
            "token": self.token,
            "stop": self.stop,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StepRecord":
        models = {
            name: ModelStep(
                status=m["status"],
                top=[(t, float(p)) for t, p in m.get("top", [])],
                pivot_top=[(t, float(p)) for t, p in m.get("pivot_top", [])],
                kept=int(m.get("kept", 0)),
                error=m.get("error"),
            )
            for name, m in data["models"].items()
        }
        return cls(int(data["step"]), models, bool(data["fallback"]), int(data["token_id"]), data["token"], bool(data["stop"]))


@dataclass
class DecodeState:
    prompt: str
    generated: str = ""
    step_log: List[StepRecord] = field(default_factory=list)
    finished: bool = False

    @property
    def text_prefix(self) -> str:
        return self.prompt + self.generated

    @property
    def steps(self) -> int:
        return len(self.step_log)


def _top_list(p: TokenDistribution, vocab: Vocabulary, n: int) -> List[Tuple[str, float]]:
    return [(vocab.tokens[i], float(p.probs[i])) for i in p.top(n)]


def _query_all(spec: EnsembleSpec, state: DecodeState) -> List[Union[TokenDistribution, Exception]]:
    """Ask every client for its next distribution; failures come back as exceptions."""
    prefix, step = state.text_prefix, state.steps

    def ask(client: ModelClient):
        try:
            q = client.next_distribution(prefix, step)
        except Exception as e:
            return e
        if q.space != "native" or len(q) != len(client.vocabulary):
            return ClientError(f"{client.name}: returned a distribution over {len(q)} {q.space} tokens")
        return q

    if spec.max_workers > 1:
        with ThreadPoolExecutor(max_workers=min(spec.max_workers, len(spec.clients))) as pool:
            return list(pool.map(ask, spec.clients))
    return [ask(client) for client in spec.clients]


def decode_step(spec: EnsembleSpec, state: DecodeState) -> Tuple[int, DecodeState]:
    """
    Run one ensemble step and append the chosen pivot token to ``state``.

    Returns:
        The chosen pivot token id and the updated state.
    """
    if state.finished:
        raise InvalidArgumentError("Decode state is already finished")
    pivot_vocab = spec.pivot_client.vocabulary
    responses = _query_all(spec, state)

    names: List[str] = []
    projected: List[TokenDistribution] = []
    records: Dict[str, ModelStep] = {}
    pivot_dist: Optional[TokenDistribution] = None
    for client, response in zip(spec.clients, responses):
        if isinstance(response, Exception):
            if spec.failure_policy == "abort":
                raise ClientError(f"{client.name} failed at step {state.steps}: {response}") from response
            logger.warning(f"{client.name} failed at step {state.steps}, dropping it for this step: {response}")
            records[client.name] = ModelStep(STATUS_FAILED, error=str(response))
            continue

        record = ModelStep(STATUS_OK, top=_top_list(response, client.vocabulary, spec.trace_top))
        records[client.name] = record
        q = topk_truncate(response, spec.k_trunc)
        if client.name == spec.pivot:
            p = TokenDistribution(client.name, q.probs, "pivot")
            pivot_dist = p
        else:
            try:
                p = project(q, spec.mappings[client.name])
            except ZeroMassError as e:
                logger.debug(f"{client.name}: {e}; treating it as filtered out")
                record.status = STATUS_ZERO_MASS
                continue
        record.pivot_top = _top_list(p, pivot_vocab, spec.trace_top)
        names.append(client.name)
        projected.append(p)

    if not projected:
        raise ClientError(f"Every model failed at step {state.steps}")

    verdicts = filter_models(projected, spec.n_filter) if spec.use_filter else [1] * len(projected)
    for name, keep in zip(names, verdicts):
        records[name].kept = keep
    fused, fell_back = fuse(projected, verdicts, pivot_dist)
    if fell_back:
        logger.warning(f"Step {state.steps}: every model was filtered out, using the pivot distribution")

    token_id = fused.argmax()
    token = pivot_vocab.tokens[token_id]
    stop = token in spec.stop_tokens
    state.step_log.append(StepRecord(state.steps, records, fell_back, token_id, token, stop))
    if stop:
        state.finished = True
    else:
        state.generated += spec.pivot_client.detokenize([token_id])
        if state.steps >= spec.max_len:
            state.finished = True
    logger.debug(f"Step {state.steps - 1}: verdicts {dict(zip(names, verdicts))} -> {token!r}")
    return token_id, state


def decode(spec: EnsembleSpec, prompt: str) -> Tuple[str, DecodeState]:
    """Greedy ensemble decoding until a stop token or ``max_len`` tokens."""
    state = DecodeState(prompt)
    if spec.max_len == 0:
        state.finished = True
    while not state.finished:
        decode_step(spec, state)
    return state.generated, state


def greedy_decode(
    client: ModelClient,
    prompt: str,
    max_len: int = 64,
    stop_tokens: Sequence[str] = ("</s>",),
) -> str:
    """Plain single-model greedy decoding, the baseline for ensemble comparisons."""
    generated = ""
    for step in range(max_len):
        token_id = client.next_distribution(prompt + generated, step).argmax()
        if client.vocabulary.tokens[token_id] in stop_tokens:
            break
        generated += client.detokenize([token_id])
    return generated


# -- traces -------------------------------------------------------------------

def write_trace(path: Union[str, Path], states: Sequence[DecodeState], digest: str = "") -> None:
    """Write decode step logs as JSONL, one step per line after a header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"kind": "header", "digest": digest, "prompts": len(states)}) + "\n")
        for index, state in enumerate(states):
            for record in state.step_log:
                line = {"kind": "step", "prompt_index": index, **record.to_dict()}
                f.write(json.dumps(line, ensure_ascii=False) + "\n")
            f.write(json.dumps({"kind": "result", "prompt_index": index, "prompt": state.prompt,
                                "output": state.generated}, ensure_ascii=False) + "\n")


def read_trace_digest(path: Union[str, Path]) -> Optional[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = json.loads(f.readline())
    except (OSError, json.JSONDecodeError):
        return None
    return header.get("digest") if header.get("kind") == "header" else None


def load_trace(path: Union[str, Path]) -> List[DecodeState]:
    """Rebuild decode states (step logs and outputs) from a trace file."""
    states: Dict[int, DecodeState] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            data = json.loads(line)
            kind = data.get("kind")
            if kind == "header":
                continue
            state = states.setdefault(int(data["prompt_index"]), DecodeState(prompt=""))
            if kind == "step":
                state.step_log.append(StepRecord.from_dict(data))
            elif kind == "result":
                state.prompt, state.generated, state.finished = data["prompt"], data["output"], True
    return [states[i] for i in sorted(states)]

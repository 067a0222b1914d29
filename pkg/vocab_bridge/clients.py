"""
Built-in ModelClient backends.

- ReplayClient: scripted per-step distributions from a JSONL file.
- ToyNgramClient: smoothed n-gram tables over its own small vocabulary.
- RemoteClient: asks a logits server over HTTP (``POST /v1/next_dist``).
"""

import json
import logging
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import httpx
import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .embed_store import Vocabulary
from .ensemble_engine import ModelClient, TokenDistribution
from .errors import ArtifactIOError, ClientError, CorruptArtifactError, InvalidArgumentError

logger = logging.getLogger(__name__)

ClientKind = Literal["replay", "ngram", "remote"]


# -- wire models shared with the logits server ---------------------------------

class NextDistRequest(BaseModel):
    prefix: str = Field(..., description="Text generated so far, prompt included")
    top_k: int = Field(default=320, ge=1, description="Number of most probable tokens to return")
    step: Optional[int] = Field(default=None, ge=0, description="Decode step index")


class NextDistResponse(BaseModel):
    tokens: List[str]
    probs: List[float]


# -- replay -------------------------------------------------------------------

class ReplayClient(ModelClient):
    """Returns the scripted distribution for each step, whatever the prefix."""

    def __init__(self, name: str, vocabulary: Vocabulary, script: Sequence[Sequence[Tuple[str, float]]]):
        super().__init__(name, vocabulary)
        self._script = [self._to_probs(dist, step) for step, dist in enumerate(script)]

    def _to_probs(self, dist: Sequence[Tuple[str, float]], step: int) -> np.ndarray:
        weights = np.zeros(len(self.vocabulary))
        for token, prob in dist:
            token_id = self.vocabulary.index.get(token)
            if token_id is None:
                raise CorruptArtifactError(f"{self.name}: replay step {step} uses unknown token {token!r}")
            if not prob >= 0:
                raise CorruptArtifactError(f"{self.name}: replay step {step} has probability {prob} for {token!r}")
            weights[token_id] += prob
        if not weights.sum() > 0:
            raise CorruptArtifactError(f"{self.name}: replay step {step} has no probability mass")
        return weights / weights.sum()

    @classmethod
    def from_jsonl(cls, name: str, vocabulary: Vocabulary, path: Union[str, Path]) -> "ReplayClient":
        """Read lines of ``{"step": s, "dist": [[token, prob], ...]}``; steps must cover 0..S-1."""
        by_step: Dict[int, List[Tuple[str, float]]] = {}
        try:
            with open(path, "r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        step = int(record["step"])
                        by_step[step] = [(str(t), float(p)) for t, p in record["dist"]]
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                        raise CorruptArtifactError(f"{path}:{lineno}: bad replay record: {e}")
        except FileNotFoundError:
            raise ArtifactIOError(f"Replay script {path} not found")
        if sorted(by_step) != list(range(len(by_step))):
            raise CorruptArtifactError(f"{path}: replay steps must be 0..{len(by_step) - 1} without gaps")
        return cls(name, vocabulary, [by_step[s] for s in range(len(by_step))])

    @property
    def steps(self) -> int:
        return len(self._script)

    def next_distribution(self, text_prefix: str, step: int = 0) -> TokenDistribution:
        if not 0 <= step < len(self._script):
            raise ClientError(f"{self.name}: no scripted distribution for step {step}")
        return TokenDistribution(self.name, self._script[step])


# -- n-gram -------------------------------------------------------------------

class ToyNgramClient(ModelClient):
    """
    Fixed-order n-gram model over its own vocabulary.

    The next-token distribution conditions on the last ``order - 1`` token ids
    of the prefix: ``(count + alpha) / (total + alpha * |V|)``. Contexts never
    seen in training give the uniform distribution.
    """

    def __init__(self, name: str, vocabulary: Vocabulary, order: int = 3, alpha: float = 1.0, eos: str = "</s>"):
        super().__init__(name, vocabulary)
        if order < 1:
            raise InvalidArgumentError(f"n-gram order must be >= 1, got {order}")
        if alpha <= 0:
            raise InvalidArgumentError(f"smoothing alpha must be positive, got {alpha}")
        if eos not in vocabulary:
            raise InvalidArgumentError(f"{name}: end-of-sequence token {eos!r} is not in the vocabulary")
        self.order = order
        self.alpha = alpha
        self.eos = eos
        self._counts: Dict[Tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()

    def _context(self, ids: Sequence[int]) -> Tuple[int, ...]:
        if self.order == 1:
            return ()
        return tuple(ids[-(self.order - 1):])

    def train(self, texts: Iterable[str]) -> "ToyNgramClient":
        """Count every (context, next token) pair; each text ends with the end-of-sequence token."""
        eos_id = self.vocabulary.id_of(self.eos)
        size = len(self.vocabulary)
        seen = 0
        with self._lock:
            for text in texts:
                ids = self.tokenize(text) + [eos_id]
                for pos, token_id in enumerate(ids):
                    counts = self._counts.setdefault(self._context(ids[:pos]), np.zeros(size))
                    counts[token_id] += 1
                seen += 1
        logger.info(f"{self.name}: trained order-{self.order} tables on {seen} texts ({len(self._counts)} contexts)")
        return self

    @property
    def contexts(self) -> int:
        return len(self._counts)

    def next_distribution(self, text_prefix: str, step: int = 0) -> TokenDistribution:
        size = len(self.vocabulary)
        counts = self._counts.get(self._context(self.tokenize(text_prefix)))
        if counts is None:
            return TokenDistribution(self.name, np.full(size, 1.0 / size))
        return TokenDistribution.from_weights(self.name, counts + self.alpha)


def read_corpus(path: Union[str, Path]) -> List[str]:
    """One training text per non-empty line."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f if line.strip()]
    except FileNotFoundError:
        raise ArtifactIOError(f"Corpus file {path} not found")


# -- remote -------------------------------------------------------------------

class RemoteClient(ModelClient):
    """Client for a logits server speaking the ``/v1/next_dist`` protocol."""

    def __init__(
        self,
        name: str,
        vocabulary: Vocabulary,
        base_url: str,
        top_k: int = 320,
        timeout: float = 30.0,
        http_client: Optional[httpx.Client] = None,
    ):
        super().__init__(name, vocabulary)
        self.base_url = base_url.rstrip("/")
        self.top_k = top_k
        self._owns_client = http_client is None
        self._http = http_client if http_client is not None else httpx.Client(timeout=timeout)

    def next_distribution(self, text_prefix: str, step: int = 0) -> TokenDistribution:
        url = f"{self.base_url}/v1/next_dist"
        payload = NextDistRequest(prefix=text_prefix, top_k=self.top_k, step=step).model_dump()
        headers = {"Accept": "application/json", "Content-Type": "application/json"}
        try:
            response = self._http.post(url, json=payload, headers=headers)
        except httpx.HTTPError as e:
            raise ClientError(f"{self.name}: request to {url} failed: {e}")

        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise ClientError(f"{self.name}: server returned {response.status_code}: {detail}")

        try:
            data = NextDistResponse.model_validate(response.json())
        except (ValueError, ValidationError) as e:
            raise ClientError(f"{self.name}: malformed response from {url}: {e}")
        if len(data.tokens) != len(data.probs):
            raise ClientError(f"{self.name}: response has {len(data.tokens)} tokens but {len(data.probs)} probs")

        weights = np.zeros(len(self.vocabulary))
        unknown = 0
        for token, prob in zip(data.tokens, data.probs):
            token_id = self.vocabulary.index.get(token)
            if token_id is None:
                unknown += 1
                continue
            if not (np.isfinite(prob) and prob >= 0):
                raise ClientError(f"{self.name}: invalid probability {prob} for {token!r}")
            weights[token_id] += prob
        if unknown:
            logger.warning(f"{self.name}: ignored {unknown} token(s) outside the local vocabulary at step {step}")
        if not weights.sum() > 0:
            raise ClientError(f"{self.name}: response carries no probability mass on known tokens")
        return TokenDistribution.from_weights(self.name, weights)

    def close(self) -> None:
        if self._owns_client:
            self._http.close()


# -- construction from config params ---------------------------------------------

class ReplayParams(BaseModel):
    script: Path = Field(..., description="JSONL replay script")


class NgramParams(BaseModel):
    order: int = Field(default=3, ge=1)
    alpha: float = Field(default=1.0, gt=0.0)
    eos: str = "</s>"
    corpus: Optional[Path] = Field(default=None, description="Training texts, one per line")
    texts: List[str] = Field(default_factory=list, description="Inline training texts")


class RemoteParams(BaseModel):
    base_url: str
    top_k: int = Field(default=320, ge=1)
    timeout: float = Field(default=30.0, gt=0.0)


CLIENT_PARAMS = {"replay": ReplayParams, "ngram": NgramParams, "remote": RemoteParams}

# params holding file paths, per client kind
PATH_PARAMS_KINDS = {"replay": ("script",), "ngram": ("corpus",)}


def parse_client_params(kind: str, params: Dict[str, Any]) -> BaseModel:
    if kind not in CLIENT_PARAMS:
        raise InvalidArgumentError(f"Unknown client kind {kind!r}")
    return CLIENT_PARAMS[kind].model_validate(params)


def build_client(
    kind: ClientKind,
    name: str,
    vocabulary: Vocabulary,
    params: Dict[str, Any],
    http_client: Optional[httpx.Client] = None,
) -> ModelClient:
    """Instantiate a client from its config entry; paths in ``params`` are taken as given."""
    parsed = parse_client_params(kind, params)
    if isinstance(parsed, ReplayParams):
        return ReplayClient.from_jsonl(name, vocabulary, parsed.script)
    if isinstance(parsed, NgramParams):
        client = ToyNgramClient(name, vocabulary, parsed.order, parsed.alpha, parsed.eos)
        texts = list(parsed.texts)
        if parsed.corpus is not None:
            texts.extend(read_corpus(parsed.corpus))
        return client.train(texts)
    return RemoteClient(name, vocabulary, parsed.base_url, parsed.top_k, parsed.timeout, http_client)

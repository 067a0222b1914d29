"""
Session configuration: one JSON document per session, overridable from the
environment.

Environment variables named ``VOCAB_BRIDGE_<KEY>`` override document keys;
nested keys are joined with ``__`` and list items are addressed by index, e.g.
``VOCAB_BRIDGE_DECODE__N=3`` or ``VOCAB_BRIDGE_MODELS__0__EMBEDDINGS=a.vec``.
Values are parsed as JSON when they parse, otherwise kept as strings.
Relative paths resolve against the document's directory.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .clients import CLIENT_PARAMS, PATH_PARAMS_KINDS, ClientKind
from .embed_store import EmbeddingFormat
from .ensemble_engine import FailurePolicy
from .errors import ConfigValidationError
from .map_builder import NoiseConfig
from .transform_learner import TransformConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "VOCAB_BRIDGE_"


class ClientSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: ClientKind = Field(..., description="replay, ngram or remote")
    params: Dict[str, Any] = Field(default_factory=dict, description="Backend-specific parameters")


class ModelEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    embeddings: Path = Field(..., description="Token embedding file")
    embedding_format: EmbeddingFormat = "word2vec-text"
    vocabulary: Optional[Path] = Field(default=None, description="JSON token list; defaults to the embedding file's order")
    normalize_unicode: bool = False
    client: ClientSettings


class DecodeSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=320, ge=1, description="Top-k truncation of native distributions")
    n: int = Field(default=40, ge=1, description="Filter width")
    max_len: int = Field(default=64, ge=0)
    stop_tokens: List[str] = Field(default_factory=lambda: ["</s>"])
    use_filter: bool = True
    failure_policy: FailurePolicy = "drop"
    trace_top: int = Field(default=40, ge=1, description="Length of the top lists written to the trace")
    prompts: List[str] = Field(default_factory=list)
    prompt_file: Optional[Path] = Field(default=None, description="One prompt per line")


class StatsSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_values: List[int] = Field(default_factory=lambda: [3, 5, 10, 20, 40])
    edges: List[float] = Field(default_factory=lambda: [0.1, 0.4, 0.6, 1.0])


class SessionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    models: List[ModelEntry] = Field(..., min_length=2)
    pivot: str = Field(default="auto", description="Pivot model name, or 'auto' for the largest vocabulary")
    transform: TransformConfig = TransformConfig()
    noise: NoiseConfig = NoiseConfig()
    csls_k: int = Field(default=10, ge=1)
    block_size: int = Field(default=1024, ge=1)
    marker_as_space: bool = False
    threads: int = Field(default=1, ge=1)
    decode: DecodeSettings = DecodeSettings()
    stats: StatsSettings = StatsSettings()
    work_dir: Path = Path("work")

    def model(self, name: str) -> ModelEntry:
        for entry in self.models:
            if entry.name == name:
                return entry
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [entry.name for entry in self.models]

    def prompts(self) -> List[str]:
        prompts = list(self.decode.prompts)
        if self.decode.prompt_file is not None:
            prompts.extend(read_prompts(self.decode.prompt_file))
        return prompts


def read_prompts(path: Union[str, Path]) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_path(doc: Any, keys: List[str], value: Any, var: str) -> None:
    node = doc
    for pos, key in enumerate(keys):
        last = pos == len(keys) - 1
        if isinstance(node, list):
            if not key.isdigit() or int(key) >= len(node):
                raise ConfigValidationError([f"{var}: no list item {key!r}"])
            if last:
                node[int(key)] = value
            else:
                node = node[int(key)]
        elif isinstance(node, dict):
            if last:
                node[key] = value
            else:
                node = node.setdefault(key, {})
        else:
            raise ConfigValidationError([f"{var}: cannot override inside a scalar value"])


def apply_env_overrides(doc: Dict[str, Any], environ: Mapping[str, str]) -> Dict[str, Any]:
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        keys = var[len(ENV_PREFIX):].lower().split("__")
        _set_path(doc, keys, _parse_env_value(environ[var]), var)
        logger.info(f"Config override from environment: {var}")
    return doc


def _format_location(loc) -> str:
    return ".".join(str(part) for part in loc)


def _resolve(base: Path, p: Optional[Path]) -> Optional[Path]:
    if p is None:
        return None
    p = p.expanduser()
    return p if p.is_absolute() else base / p


def _resolve_paths(cfg: SessionConfig, base: Path) -> SessionConfig:
    models = []
    for entry in cfg.models:
        params = dict(entry.client.params)
        for key in PATH_PARAMS_KINDS.get(entry.client.kind, ()):
            if isinstance(params.get(key), str):
                params[key] = str(_resolve(base, Path(params[key])))
        models.append(entry.model_copy(update={
            "embeddings": _resolve(base, entry.embeddings),
            "vocabulary": _resolve(base, entry.vocabulary),
            "client": entry.client.model_copy(update={"params": params}),
        }))
    decode = cfg.decode.model_copy(update={"prompt_file": _resolve(base, cfg.decode.prompt_file)})
    return cfg.model_copy(update={"models": models, "decode": decode, "work_dir": _resolve(base, cfg.work_dir)})


def semantic_problems(cfg: SessionConfig) -> List[str]:
    """Problems pydantic cannot see: names, pivot, files on disk, client parameters."""
    problems = []
    seen = set()
    for i, entry in enumerate(cfg.models):
        if entry.name in seen:
            problems.append(f"models.{i}.name: duplicate model name {entry.name!r}")
        seen.add(entry.name)
        if not entry.embeddings.is_file():
            problems.append(f"models.{i}.embeddings: file not found: {entry.embeddings}")
        if entry.vocabulary is not None and not entry.vocabulary.is_file():
            problems.append(f"models.{i}.vocabulary: file not found: {entry.vocabulary}")
        try:
            params = CLIENT_PARAMS[entry.client.kind].model_validate(entry.client.params)
        except ValidationError as e:
            for err in e.errors():
                problems.append(f"models.{i}.client.params.{_format_location(err['loc'])}: {err['msg']}")
            continue
        for key in PATH_PARAMS_KINDS.get(entry.client.kind, ()):
            value = getattr(params, key, None)
            if value is not None and not Path(value).is_file():
                problems.append(f"models.{i}.client.params.{key}: file not found: {value}")
    if cfg.pivot != "auto" and cfg.pivot not in seen:
        problems.append(f"pivot: {cfg.pivot!r} is not a configured model")
    if cfg.decode.prompt_file is not None and not cfg.decode.prompt_file.is_file():
        problems.append(f"decode.prompt_file: file not found: {cfg.decode.prompt_file}")
    if sorted(cfg.stats.edges) != cfg.stats.edges or len(set(cfg.stats.edges)) != len(cfg.stats.edges):
        problems.append("stats.edges: must be strictly ascending")
    if any(n < 2 for n in cfg.stats.n_values):
        problems.append("stats.n_values: every n must be >= 2")
    return problems


def validate_session(doc: Dict[str, Any], base_dir: Union[str, Path] = ".") -> SessionConfig:
    """
    Validate a session document and resolve its paths.

    Raises:
        ConfigValidationError: listing every problem found, each prefixed with its field path.
    """
    try:
        cfg = SessionConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigValidationError([f"{_format_location(err['loc'])}: {err['msg']}" for err in e.errors()])
    cfg = _resolve_paths(cfg, Path(base_dir))
    problems = semantic_problems(cfg)
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def load_session(path: Union[str, Path], environ: Optional[Mapping[str, str]] = None) -> SessionConfig:
    """Read, override from the environment, and validate a session file."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigValidationError([f"config: file not found: {path}"])
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"config: invalid JSON in {path}: {e}"])
    if not isinstance(doc, dict):
        raise ConfigValidationError([f"config: {path} must hold a JSON object"])
    doc = apply_env_overrides(doc, os.environ if environ is None else environ)
    cfg = validate_session(doc, path.parent)
    logger.info(f"Loaded session {path} with models {cfg.names}")
    return cfg

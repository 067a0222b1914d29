"""
Vocabulary alignment and token-level ensembling of language models whose
tokenizers differ.
"""

from .embed_store import EmbeddingSet, Vocabulary, load_embeddings, preprocess, save_embeddings
from .ensemble_engine import (
    DecodeState,
    EnsembleSpec,
    ModelClient,
    TokenDistribution,
    decode,
    decode_step,
    filter_models,
    fuse,
    project,
    select_pivot,
    topk_truncate,
)
from .errors import VocabBridgeError
from .map_builder import NoiseConfig, SparseMapping, build_mapping, load_mapping, save_mapping
from .overlap import OverlapDictionary, build_overlap, overlap_rate
from .similarity import csls
from .transform_learner import LinearTransform, TransformConfig, learn_transform

__version__ = "0.1.0"

__all__ = [
    "DecodeState",
    "EmbeddingSet",
    "EnsembleSpec",
    "LinearTransform",
    "ModelClient",
    "NoiseConfig",
    "OverlapDictionary",
    "SparseMapping",
    "TokenDistribution",
    "TransformConfig",
    "VocabBridgeError",
    "Vocabulary",
    "build_mapping",
    "build_overlap",
    "csls",
    "decode",
    "decode_step",
    "filter_models",
    "fuse",
    "learn_transform",
    "load_embeddings",
    "load_mapping",
    "overlap_rate",
    "preprocess",
    "project",
    "save_embeddings",
    "save_mapping",
    "select_pivot",
    "topk_truncate",
]

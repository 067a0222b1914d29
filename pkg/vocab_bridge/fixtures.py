"""
Small deterministic sessions and client sets for demos and tests.

    python -m vocab_bridge.fixtures <dir>

writes ``<dir>/synthetic`` (two models over a ~50-token lexicon, runnable end
to end) and ``<dir>/three_way`` (three scripted models disagreeing on one step).
"""

import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import scipy.stats

from .clients import ReplayClient, ToyNgramClient
from .embed_store import SPACE_MARKER, EmbeddingSet, Vocabulary, save_embeddings
from .map_builder import MappingProvenance, NoiseConfig, SparseMapping, save_mapping

logger = logging.getLogger(__name__)

EOS = "</s>"
LATENT_DIM = 16

LEXICON = ("the", "cat", "dog", "sat", "on", "mat", "a", "ran", "to", "park", "big", "red", "sun", "hat")
ALPHA_WORDS = ("the", "cat", "dog", "sat", "on", "mat", "a", "ran", "to", "park")
ALPHA_PIECES = ("ca", "do", "ma")
SENTENCES = (
    "the cat sat on the mat",
    "the dog ran to the park",
    "a big cat sat on a red mat",
    "the red dog sat in the sun",
    "a cat ran to the big park",
    "the dog sat on the hat",
)
PROMPTS = (" the cat", " a big", " the dog ran")

THREE_WAY_PIVOT = ("_Des", "_Typ", "und", "_In", "_Ex")
THREE_WAY_DISTS = {
    "Q1": {"_Des": 0.50, "_Typ": 0.30, "_In": 0.15, "und": 0.03, "_Ex": 0.02},
    "Q2": {"_Typ": 0.40, "und": 0.35, "_Ex": 0.15, "_In": 0.06, "_Des": 0.04},
    "Q3": {"und": 0.45, "_Typ": 0.30, "_In": 0.20, "_Ex": 0.03, "_Des": 0.02},
}
THREE_WAY_VOCABS = {
    "Q1": ("und", "_Ex", "_Typ", "_Des", "_In", "_Ext"),
    "Q2": THREE_WAY_PIVOT,
    "Q3": ("_In", "und", "_Des", "_Ex", "_Typ", "ung"),
}


def _token_rng(token: str, salt: str = "") -> np.random.Generator:
    seed = int.from_bytes(hashlib.sha256((salt + token).encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed)


def latent_vectors(tokens: Sequence[str], dim: int = LATENT_DIM) -> np.ndarray:
    """One fixed random vector per surface string, identical across models."""
    return np.stack([_token_rng(t).standard_normal(dim) for t in tokens])


def _vocab_tokens(words: Sequence[str], pieces: Sequence[str] = ()) -> List[str]:
    letters = sorted({ch for w in words for ch in w} - set(words) - set(pieces))
    return [SPACE_MARKER + w for w in words] + list(words) + list(pieces) + letters + [SPACE_MARKER, EOS]


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding="utf-8")


def write_synthetic_session(directory: Union[str, Path], seed: int = 0, noise: float = 0.01) -> Path:
    """
    Two n-gram models with overlapping subword vocabularies.

    "beta" has the larger vocabulary and becomes the pivot. alpha's embeddings
    are beta's latent vectors under a random rotation plus Gaussian noise, so
    shared tokens are recoverable through the overlap dictionary.

    Returns:
        Path of the session file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    beta_tokens = _vocab_tokens(LEXICON)
    alpha_tokens = _vocab_tokens(ALPHA_WORDS, ALPHA_PIECES)
    rotation = scipy.stats.special_ortho_group.rvs(LATENT_DIM, random_state=seed)

    beta = latent_vectors(beta_tokens)
    alpha = latent_vectors(alpha_tokens) @ rotation + noise * rng.standard_normal((len(alpha_tokens), LATENT_DIM))
    save_embeddings(
        EmbeddingSet(Vocabulary.from_tokens(alpha_tokens), alpha.astype(np.float32)),
        directory / "alpha.vec", "word2vec-text",
    )
    save_embeddings(
        EmbeddingSet(Vocabulary.from_tokens(beta_tokens), beta.astype(np.float32)),
        directory / "beta.bin", "binary-native",
    )
    corpus = "\n".join(" " + s for s in SENTENCES) + "\n"
    (directory / "corpus.txt").write_text(corpus, encoding="utf-8")

    session = {
        "models": [
            {
                "name": "alpha",
                "embeddings": "alpha.vec",
                "embedding_format": "word2vec-text",
                "client": {"kind": "ngram", "params": {"order": 3, "corpus": "corpus.txt"}},
            },
            {
                "name": "beta",
                "embeddings": "beta.bin",
                "embedding_format": "binary-native",
                "client": {"kind": "ngram", "params": {"order": 4, "corpus": "corpus.txt"}},
            },
        ],
        "pivot": "auto",
        "csls_k": 10,
        "decode": {"k": 320, "n": 5, "max_len": 8, "prompts": list(PROMPTS)},
        "stats": {"n_values": [3, 5, 10]},
        "work_dir": "work",
    }
    path = directory / "session.json"
    _write_json(path, session)
    logger.info(f"Wrote synthetic session to {path}")
    return path


# -- the three-model step -----------------------------------------------------------

def three_way_mapping(source: Vocabulary, pivot: Vocabulary) -> SparseMapping:
    """One-hot rows joining identical surfaces; tokens missing from the pivot stay unmapped."""
    indptr, indices = [0], []
    kinds = []
    for token in source.tokens:
        if token in pivot:
            indices.append(pivot.id_of(token))
            kinds.append(0)
        else:
            kinds.append(1)
        indptr.append(len(indices))
    provenance = MappingProvenance(source.digest(), pivot.digest(), NoiseConfig())
    return SparseMapping.from_arrays(
        len(source), len(pivot), np.array(indptr), np.array(indices), np.ones(len(indices)), np.array(kinds), provenance
    )


def three_way_clients() -> Tuple[List[ReplayClient], Dict[str, SparseMapping]]:
    """Replay clients Q1, Q2 (pivot), Q3 scripted for one step, plus the mappings into Q2."""
    vocabs = {name: Vocabulary.from_tokens(tokens) for name, tokens in THREE_WAY_VOCABS.items()}
    clients = [
        ReplayClient(name, vocabs[name], [sorted(THREE_WAY_DISTS[name].items())])
        for name in ("Q1", "Q2", "Q3")
    ]
    mappings = {name: three_way_mapping(vocabs[name], vocabs["Q2"]) for name in ("Q1", "Q3")}
    return clients, mappings


def write_three_way_session(directory: Union[str, Path]) -> Path:
    """
    Replay scripts, vocabularies, placeholder embeddings and ready-made
    mappings, so ``vocab-bridge decode`` runs the single step directly.
    """
    directory = Path(directory)
    (directory / "work" / "maps").mkdir(parents=True, exist_ok=True)
    vocabs = {name: Vocabulary.from_tokens(tokens) for name, tokens in THREE_WAY_VOCABS.items()}
    models = []
    for name, vocab in vocabs.items():
        line = {"step": 0, "dist": [[t, p] for t, p in sorted(THREE_WAY_DISTS[name].items())]}
        (directory / f"{name}.replay.jsonl").write_text(json.dumps(line) + "\n", encoding="utf-8")
        save_embeddings(
            EmbeddingSet(vocab, latent_vectors(vocab.tokens, 4).astype(np.float32)),
            directory / f"{name}.vec", "word2vec-text",
        )
        models.append({
            "name": name,
            "embeddings": f"{name}.vec",
            "client": {"kind": "replay", "params": {"script": f"{name}.replay.jsonl"}},
        })
        if name != "Q2":
            save_mapping(three_way_mapping(vocab, vocabs["Q2"]), directory / "work" / "maps" / f"{name}__Q2.evam")

    session = {
        "models": models,
        "pivot": "Q2",
        "csls_k": 2,
        "decode": {"k": 320, "n": 3, "max_len": 1, "prompts": ["Die Katze"]},
        "stats": {"n_values": [3]},
        "work_dir": "work",
    }
    path = directory / "session.json"
    _write_json(path, session)
    return path


# -- constructed client pairs -------------------------------------------------------

@dataclass
class ComplementaryTask:
    clients: List[ToyNgramClient]
    prompts: List[str]
    answers: List[str]


def complementary_ngram_pair(n_prompts: int = 200, repeats: int = 5) -> ComplementaryTask:
    """
    Two word-level n-gram models, each trained on one half of the prompts.

    Every prompt ``pNNN =`` has a one-token answer. On its own half a model is
    confidently right; on the other half it has never seen the context and is
    uniform, which puts all answers in its top-3.
    """
    answers_pool = ("A", "B", "C")
    tokens = list(answers_pool) + [f"p{i:03d}" for i in range(n_prompts)] + ["=", EOS]
    vocab = Vocabulary.from_tokens(tokens)
    prompts = [f"p{i:03d} =" for i in range(n_prompts)]
    answers = [answers_pool[(7 * i + 1) % 3] for i in range(n_prompts)]
    clients = []
    for name, half in (("even", 0), ("odd", 1)):
        texts = [f"{p} {a}" for i, (p, a) in enumerate(zip(prompts, answers)) if i % 2 == half]
        clients.append(ToyNgramClient(name, vocab, order=3).train(texts * repeats))
    return ComplementaryTask(clients, prompts, answers)


ENTROPY_STEMS = ("bcd", "fgh", "jkl", "mnp", "qrs", "tvw", "xyz")
ENTROPY_SUFFIXES = ("", "s", "ed", "er", "ing", "ers")


def entropy_replay_pair(steps: int = 7) -> Tuple[ReplayClient, ReplayClient]:
    """
    A peaked client whose runners-up are spelling variants of its top token,
    and a flat client whose runners-up are unrelated words.
    """
    tokens = [stem + suffix for stem in ENTROPY_STEMS for suffix in ENTROPY_SUFFIXES] + [EOS]
    vocab = Vocabulary.from_tokens(tokens)
    low_script, high_script = [], []
    for step in range(steps):
        stem = ENTROPY_STEMS[step % len(ENTROPY_STEMS)]
        variants = [stem + suffix for suffix in ENTROPY_SUFFIXES]
        others = [t for t in tokens if t not in variants]
        low_order = variants + others
        high_order = [stem] + others + variants[1:]
        low_script.append([(t, 0.5 ** rank) for rank, t in enumerate(low_order)])
        high_script.append([(t, 0.9 ** rank) for rank, t in enumerate(high_order)])
    return ReplayClient("low", vocab, low_script), ReplayClient("high", vocab, high_script)


def main(argv: Sequence[str] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if len(argv) != 1:
        print("usage: python -m vocab_bridge.fixtures <dir>", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    root = Path(argv[0])
    print(write_synthetic_session(root / "synthetic"))
    print(write_three_way_session(root / "three_way"))
    return 0


if __name__ == "__main__":
    sys.exit(main())

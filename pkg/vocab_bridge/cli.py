"""
Command-line entry point.

    vocab-bridge [--config FILE] [--threads N] [--log-level LEVEL] [--json-errors] <command> ...

Commands: align, build-map, inspect-overlap, inspect-map, decode, stats, run.
Exit codes: 0 success, 2 validation error, 3 stage error, 4 I/O error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from .analysis import diversity, similarity_bins, write_diversity_csv
from .config import SessionConfig, load_session, read_prompts
from .embed_store import load_embeddings, preprocess
from .ensemble_engine import load_trace, write_trace
from .errors import ArtifactIOError, ConfigValidationError, StageError, VocabBridgeError
from .map_builder import load_mapping, mapping_mismatches
from .overlap import build_overlap, overlap_matrix, overlap_report
from .pipeline import STAGES, Session, decode_prompts, ensemble_spec, run_pipeline, stats_report
from .transform_learner import TransformConfig, learn_transform, save_transform

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def _emit(payload: Dict) -> None:
    print(json.dumps(payload, indent=2, ensure_ascii=False))


def _require_config(args) -> SessionConfig:
    if not getattr(args, "config", None):
        raise ConfigValidationError(["config: --config is required for this command"])
    return load_session(args.config)


# -- commands -------------------------------------------------------------------

def cmd_stages(args) -> int:
    stages = args.stages if args.command == "run" else [args.command]
    report = run_pipeline(_require_config(args), stages, args.threads, args.force)
    _emit(report.to_dict())
    return 0


def cmd_align(args) -> int:
    if not (args.source or args.target or args.out):
        return cmd_stages(args)
    if not (args.source and args.target and args.out):
        raise ConfigValidationError(["align: --source, --target and --out must be given together"])
    settings = {"whiten": not args.no_whiten}
    if args.reweight is not None:
        settings["reweight"] = args.reweight
    try:
        cfg = TransformConfig(**settings)
    except ValidationError as e:
        raise ConfigValidationError([f"align: {err['msg']}" for err in e.errors()])

    eq, _ = preprocess(load_embeddings(args.source, args.format))
    ep, _ = preprocess(load_embeddings(args.target, args.format))
    d = build_overlap(eq.vocab, ep.vocab)
    transform = learn_transform(eq, ep, d, cfg)
    save_transform(transform, args.out)
    _emit({"out": args.out, "shape": list(transform.shape), "overlap": overlap_report(d, eq.vocab)})
    return 0


def cmd_inspect_overlap(args) -> int:
    if args.source and args.target:
        vq = load_embeddings(args.source, args.format).vocab
        vp = load_embeddings(args.target, args.format).vocab
        d = build_overlap(vq, vp, args.marker_as_space)
        _emit(overlap_report(d, vq, include_pairs=args.pairs))
        return 0

    session = Session(_require_config(args), args.threads)
    vocabs = {name: session.vocabulary(name) for name in session.cfg.names}
    names, rates = overlap_matrix(vocabs)
    pivot = session.pivot
    _emit({
        "pivot": pivot,
        "models": names,
        "rates": rates.round(6).tolist(),
        "to_pivot": {
            source: overlap_report(
                build_overlap(vocabs[source], vocabs[pivot], session.cfg.marker_as_space),
                vocabs[source],
                include_pairs=args.pairs,
            )
            for source in session.sources
        },
    })
    return 0


def cmd_inspect_map(args) -> int:
    m = load_mapping(args.map, force=True)
    p = m.provenance
    payload = {
        "shape": list(m.shape),
        "entries": m.nnz,
        "rows": m.kind_counts(),
        "aligned_fraction": m.aligned_fraction,
        "noise": p.noise.model_dump(),
        "csls_k": p.csls_k,
        "source_digest": p.source_digest.hex(),
        "target_digest": p.target_digest.hex(),
        "inputs_digest": p.inputs_digest.hex(),
        "histogram": similarity_bins(m).to_dict(),
    }
    if getattr(args, "config", None):
        session = Session(load_session(args.config), args.threads)
        source = args.source or Path(args.map).name.split("__")[0]
        problems = mapping_mismatches(
            p, session.vocabulary(source), session.vocabulary(session.pivot), session.cfg.noise
        )
        if p.inputs_digest != session.mapping_digest(source):
            problems.append("inputs digest differs from the session's transform chain")
        payload["verified"] = not problems
        payload["problems"] = problems
        _emit(payload)
        return 0 if not problems else StageError.exit_code
    _emit(payload)
    return 0


def cmd_decode(args) -> int:
    cfg = _require_config(args)
    session = Session(cfg, args.threads, accept_mismatch=args.accept_mismatch)
    prompts: List[str] = list(args.prompt or [])
    if args.prompt_file:
        prompts.extend(read_prompts(args.prompt_file))
    if not prompts:
        prompts = cfg.prompts()
    if not prompts:
        raise ConfigValidationError(["decode: no prompts given (--prompt, --prompt-file or decode.prompts)"])

    overrides = {}
    if args.n is not None:
        overrides["n_filter"] = args.n
    if args.k is not None:
        overrides["k_trunc"] = args.k
    if args.max_len is not None:
        overrides["max_len"] = args.max_len
    if args.no_filter:
        overrides["use_filter"] = False
    try:
        spec = ensemble_spec(session, **overrides)
    except ArtifactIOError as e:
        raise ArtifactIOError(f"{e.detail} (run build-map first)")
    try:
        states = decode_prompts(spec, prompts)
    finally:
        session.close()
    if args.trace:
        write_trace(args.trace, states)
    _emit({"outputs": [{"prompt": s.prompt, "output": s.generated, "steps": s.steps} for s in states]})
    return 0


def cmd_stats(args) -> int:
    states = load_trace(args.trace) if args.trace else []
    mappings = {Path(path).stem: load_mapping(path, force=True) for path in (args.map or [])}
    report = stats_report(states, mappings, args.n_values, args.edges)
    if args.csv:
        write_diversity_csv(diversity(states, args.n_values), args.csv)
    _emit(report)
    return 0


# -- parser ---------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--config", "--spec", dest="config", default=default(None), help="Session config file")
    flags.add_argument("--threads", type=int, default=default(None), help="Worker threads (default: from config)")
    flags.add_argument("--log-level", default=default("INFO"), help="DEBUG, INFO, WARNING or ERROR")
    flags.add_argument("--json-errors", action="store_true", default=default(False), help="Print errors as JSON on stderr")
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vocab-bridge",
        description="Align tokenizer vocabularies and ensemble models with different vocabularies",
        parents=[_global_flags(suppress=False)],
    )
    common = [_global_flags(suppress=True)]
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="Learn transforms into the pivot space", parents=common)
    p.add_argument("--force", action="store_true", help="Recompute even when artifacts are current")
    p.add_argument("--source", help="Source embedding file (standalone mode, instead of --config)")
    p.add_argument("--target", help="Target embedding file (standalone mode)")
    p.add_argument("--out", help="Transform file to write (standalone mode)")
    p.add_argument("--format", default="word2vec-text", choices=["word2vec-text", "binary-native"])
    p.add_argument("--no-whiten", action="store_true")
    p.add_argument("--reweight", type=float, help="Singular value exponent s")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("build-map", help="Build sparse mappings", parents=common)
    p.add_argument("--force", action="store_true", help="Recompute even when artifacts are current")
    p.set_defaults(func=cmd_stages)

    p = sub.add_parser("run", help="Run pipeline stages with their dependencies", parents=common)
    p.add_argument("--stages", nargs="+", choices=STAGES, default=list(STAGES))
    p.add_argument("--force", action="store_true", help="Recompute even when artifacts are current")
    p.set_defaults(func=cmd_stages)

    p = sub.add_parser("inspect-overlap", help="Report shared-token rates", parents=common)
    p.add_argument("--source", help="Source embedding file (instead of --config)")
    p.add_argument("--target", help="Target embedding file (instead of --config)")
    p.add_argument("--format", default="word2vec-text", choices=["word2vec-text", "binary-native"])
    p.add_argument("--marker-as-space", action="store_true")
    p.add_argument("--pairs", action="store_true", help="Include the pair list")
    p.set_defaults(func=cmd_inspect_overlap)

    p = sub.add_parser("inspect-map", help="Describe a mapping file and verify it against a session", parents=common)
    p.add_argument("--map", required=True)
    p.add_argument("--source", help="Source model name (default: from the file name)")
    p.set_defaults(func=cmd_inspect_map)

    p = sub.add_parser("decode", help="Ensemble-decode prompts", parents=common)
    p.add_argument("--prompt", action="append", help="Prompt text (repeatable)")
    p.add_argument("--prompt-file", help="One prompt per line")
    p.add_argument("--n", type=int, help="Filter width")
    p.add_argument("--k", type=int, help="Top-k truncation")
    p.add_argument("--max-len", type=int)
    p.add_argument("--no-filter", action="store_true", help="Average every model")
    p.add_argument("--trace", help="Write the step log as JSONL")
    p.add_argument("--accept-mismatch", action="store_true",
                   help="Use saved mappings even when their provenance differs from the session (logged as a warning)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stats", help="Diversity and similarity reports", parents=common)
    p.add_argument("--trace", help="Decode trace")
    p.add_argument("--map", action="append", help="Mapping file (repeatable)")
    p.add_argument("--n-values", type=int, nargs="+", default=[3, 5, 10, 20, 40])
    p.add_argument("--edges", type=float, nargs="+", default=[0.1, 0.4, 0.6, 1.0])
    p.add_argument("--csv", help="Write the diversity table as CSV")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )
    try:
        return args.func(args)
    except VocabBridgeError as e:
        return _fail(args, e)
    except OSError as e:
        return _fail(args, ArtifactIOError(str(e)))
    except Exception as e:
        logger.exception("Unexpected failure")
        return _fail(args, StageError(f"{type(e).__name__}: {e}"))


def _fail(args, error: VocabBridgeError) -> int:
    if args.json_errors:
        print(json.dumps(error.to_dict()), file=sys.stderr)
    else:
        logger.error(error.detail)
        for problem in error.problems:
            logger.error(f"  {problem}")
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Logits Server

A FastAPI application that serves next-token distributions of one model so a
RemoteClient can take part in an ensemble.

Endpoints:
- GET /: Health check with the served model's name and vocabulary size
- POST /v1/next_dist: Top-k next-token distribution for a text prefix
"""

import argparse
import logging
from typing import Optional

from fastapi import FastAPI, HTTPException

from .clients import NextDistRequest, NextDistResponse, build_client
from .config import load_session
from .embed_store import load_embeddings, load_vocabulary
from .ensemble_engine import ModelClient
from .errors import VocabBridgeError

logger = logging.getLogger(__name__)


def create_app(client: ModelClient) -> FastAPI:
    """Build the app around any local ModelClient."""
    app = FastAPI(
        title="Vocab Bridge Logits Server",
        description=f"Next-token distributions of model {client.name!r}",
        version="0.1.0",
    )

    @app.get("/")
    async def root():
        """Health check endpoint."""
        return {
            "message": "Logits server is running",
            "model": client.name,
            "vocab_size": len(client.vocabulary),
        }

    @app.post("/v1/next_dist", response_model=NextDistResponse)
    def next_dist(request: NextDistRequest):
        """
        Most probable next tokens for the given prefix, in descending probability order.
        """
        try:
            dist = client.next_distribution(request.prefix, request.step or 0)
        except Exception as e:
            raise HTTPException(status_code=500, detail=f"Failed to compute next distribution: {str(e)}")

        top = dist.top(request.top_k)
        return NextDistResponse(
            tokens=[client.vocabulary.tokens[i] for i in top],
            probs=[float(dist.probs[i]) for i in top],
        )

    return app


def client_from_session(config_path: str, model: str) -> ModelClient:
    """Build the configured client of ``model``; remote entries cannot be served."""
    cfg = load_session(config_path)
    entry = cfg.model(model)
    if entry.client.kind == "remote":
        raise VocabBridgeError(f"Model {model!r} is itself remote; serve a local client instead")
    if entry.vocabulary is not None:
        vocab = load_vocabulary(entry.vocabulary, entry.normalize_unicode)
    else:
        vocab = load_embeddings(entry.embeddings, entry.embedding_format, entry.normalize_unicode).vocab
    return build_client(entry.client.kind, entry.name, vocab, entry.client.params)


def main(argv: Optional[list] = None) -> None:
    parser = argparse.ArgumentParser(description="Serve one model's next-token distributions over HTTP")
    parser.add_argument("--config", required=True, help="Session config file")
    parser.add_argument("--model", required=True, help="Name of the model entry to serve")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    try:
        client = client_from_session(args.config, args.model)
    except KeyError:
        parser.error(f"no model named {args.model!r} in {args.config}")
    except VocabBridgeError as e:
        logger.error(str(e))
        raise SystemExit(e.exit_code)

    import uvicorn
    uvicorn.run(create_app(client), host=args.host, port=args.port)


if __name__ == "__main__":
    main()

"""Wire-protocol server: /generate, /relevance, /embed.

Request and response shapes follow the generation wire protocol of the
dialogue engine; every error surfaces as an HTTP status plus
{"error": str} so thin clients never have to parse framework-specific
bodies. Inference runs under a lock: the tiny model is cheap enough
that serialized requests beat cross-request batching complexity.
"""

from __future__ import annotations

import argparse
import threading
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .model import embed_texts, generate_text, load_checkpoint, relevance_of
from .vocab import Vocabulary


class GenerateRequest(BaseModel):
    task: str = Field(min_length=1)
    prompt: str = Field(min_length=1)
    max_output_tokens: int = Field(default=128, ge=1, le=4096)
    beam_size: int = Field(default=1, ge=1, le=16)


class RelevanceRequest(BaseModel):
    query: str
    record: str


class EmbedRequest(BaseModel):
    texts: list[str] = Field(min_length=1, max_length=256)


def create_app(checkpoint: str | Path | None = None, model=None,
               vocab: Vocabulary | None = None,
               input_length: int = 1024) -> FastAPI:
    if model is None or vocab is None:
        if checkpoint is None:
            raise ValueError("create_app needs a checkpoint path or a model+vocab")
        model, vocab = load_checkpoint(checkpoint)
    model.eval()

    app = FastAPI(title="qtod-modelserver", docs_url=None, redoc_url=None)
    lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return JSONResponse({"error": f"invalid request: {exc.errors()[:3]}"},
                            status_code=400)

    @app.exception_handler(Exception)
    async def _inference_failure(request: Request, exc: Exception):
        return JSONResponse({"error": f"{type(exc).__name__}: {exc}"},
                            status_code=500)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"ok": True, "vocab_size": len(vocab)}

    @app.post("/generate")
    def generate(request: GenerateRequest) -> dict:
        with lock:
            text = generate_text(
                model, vocab, request.prompt,
                max_output_tokens=request.max_output_tokens,
                beam_size=request.beam_size,
                input_length=input_length,
            )
        return {"text": text}

    @app.post("/relevance")
    def relevance(request: RelevanceRequest) -> dict:
        with lock:
            label, score = relevance_of(
                model, vocab, request.query, request.record,
                input_length=input_length,
            )
        return {"label": label, "score": score}

    @app.post("/embed")
    def embed(request: EmbedRequest) -> dict:
        with lock:
            vectors, dim = embed_texts(
                model, vocab, request.texts, input_length=input_length
            )
        return {"vectors": vectors, "dim": dim}

    return app


def main(argv=None) -> None:
    import uvicorn

    parser = argparse.ArgumentParser(description="Serve a trained checkpoint.")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8100)
    parser.add_argument("--input-length", type=int, default=1024)
    args = parser.parse_args(argv)

    app = create_app(checkpoint=args.checkpoint, input_length=args.input_length)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    main()

"""HTTP service exposing a checkpoint over the step protocol.

Routes (protocol version 1, natural-log probabilities):

* ``GET /v1/meta`` -> protocol, vocab size, model name, language codes.
* ``POST /v1/step`` -> one dense log-probability vector per query,
  order-preserving.

Malformed requests get 400 with an error body; batches over the configured
maximum get 429.  One model instance serves all requests; batch execution
is serialized on the device while HTTP handling stays concurrent.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .backend import BackendRequestError, CheckpointBackend, StepRequest

PROTOCOL_VERSION = 1


@dataclass
class ServerConfig:
    checkpoint: str
    device: str = "cpu"
    max_batch: int = 64
    port: int = 8900
    host: str = "127.0.0.1"
    lang_token_map: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")

    @classmethod
    def with_lang_map_file(cls, checkpoint: str, lang_map_path: str, **kw) -> "ServerConfig":
        with open(lang_map_path, "r", encoding="utf-8") as fh:
            mapping = {str(k): int(v) for k, v in json.load(fh).items()}
        return cls(checkpoint=checkpoint, lang_token_map=mapping, **kw)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: ServerConfig, backend: CheckpointBackend | None = None) -> FastAPI:
    backend = backend or CheckpointBackend(
        checkpoint=config.checkpoint,
        device=config.device,
        lang_token_map=config.lang_token_map,
    )
    app = FastAPI(title="modelserver")
    device_lock = threading.Lock()

    @app.get("/v1/meta")
    def meta():
        return {
            "protocol": PROTOCOL_VERSION,
            "vocab_size": backend.vocab_size,
            "model": backend.model_name,
            "languages": backend.languages(),
        }

    @app.post("/v1/step")
    async def step(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return _error(400, "body is not JSON")
        queries = payload.get("queries") if isinstance(payload, dict) else None
        if not isinstance(queries, list):
            return _error(400, "missing queries list")
        if len(queries) > config.max_batch:
            return _error(429, f"batch of {len(queries)} exceeds max {config.max_batch}")
        requests = []
        for i, q in enumerate(queries):
            if not isinstance(q, dict):
                return _error(400, f"query {i} is not an object")
            try:
                requests.append(
                    StepRequest(
                        src_lang=str(q["src_lang"]),
                        tgt_lang=str(q["tgt_lang"]),
                        source_tokens=q.get("source_tokens"),
                        source_text=q.get("source_text"),
                        prefix_tokens=list(q.get("prefix_tokens", ())),
                    )
                )
            except (KeyError, TypeError) as exc:
                return _error(400, f"query {i} malformed: {exc}")
        try:
            with device_lock:
                logprobs = backend.step(requests)
        except BackendRequestError as exc:
            return _error(400, str(exc))
        return {"logprobs": logprobs.tolist()}

    return app


def serve(config: ServerConfig) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")

"""Fixtures: a tiny random-weight seq2seq checkpoint and a live server."""

from __future__ import annotations

import socket
import threading
import time

import pytest
import torch

LANG_MAP = {"aa": 50, "bb": 51, "cc": 52}
VOCAB_SIZE = 64
EOS_ID = 2


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory) -> str:
    """A small M2M100-architecture checkpoint saved locally (no downloads)."""
    from transformers import M2M100Config, M2M100ForConditionalGeneration

    config = M2M100Config(
        vocab_size=VOCAB_SIZE,
        d_model=32,
        encoder_layers=2,
        decoder_layers=2,
        encoder_attention_heads=2,
        decoder_attention_heads=2,
        encoder_ffn_dim=64,
        decoder_ffn_dim=64,
        max_position_embeddings=128,
        pad_token_id=1,
        bos_token_id=0,
        eos_token_id=EOS_ID,
        decoder_start_token_id=EOS_ID,
    )
    torch.manual_seed(1234)
    model = M2M100ForConditionalGeneration(config).eval()
    path = tmp_path_factory.mktemp("checkpoint") / "tiny-m2m"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def backend(tiny_checkpoint):
    from modelserver import CheckpointBackend

    return CheckpointBackend(checkpoint=tiny_checkpoint, lang_token_map=dict(LANG_MAP))


@pytest.fixture(scope="session")
def live_server(tiny_checkpoint, backend):
    """The FastAPI app on a real local port via uvicorn."""
    import uvicorn

    from modelserver import ServerConfig, create_app

    config = ServerConfig(
        checkpoint=tiny_checkpoint, max_batch=32, lang_token_map=dict(LANG_MAP)
    )
    app = create_app(config, backend=backend)
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)

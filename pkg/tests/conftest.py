"""Shared test helpers: random distributions, deterministic scorers, mock server."""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from pivotens import StepDistribution

# ---------------------------------------------------------------------------
# Distributions and scorers
# ---------------------------------------------------------------------------


def random_dist(rng: np.random.Generator, size: int) -> StepDistribution:
    """A random normalized distribution (Dirichlet, strictly positive mass)."""
    return StepDistribution.from_probs(rng.dirichlet(np.ones(size)))


def _digest_seed(*parts) -> list[int]:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]


class HashScorer:
    """Deterministic synthetic scorer: the distribution for a query is a pure
    hash of (source language, source ids, prefix ids).  Used wherever the
    decoder needs an arbitrary but reproducible probability landscape.
    """

    def __init__(self, vocab_size: int, eos_id: int, salt: int = 0):
        self._vocab_size = vocab_size
        self._eos_id = eos_id
        self.salt = salt

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def eos_id(self) -> int:
        return self._eos_id

    def distribution(self, query) -> StepDistribution:
        rng = np.random.default_rng(
            _digest_seed(self.salt, query.src_lang, query.source.ids, query.prefix.ids)
        )
        return random_dist(rng, self._vocab_size)

    def step_batch(self, queries):
        return [self.distribution(q) for q in queries]


class FailingScorer(HashScorer):
    """Raises once a prefix reaches the configured length."""

    def __init__(self, vocab_size: int, eos_id: int, fail_at_len: int):
        super().__init__(vocab_size, eos_id)
        self.fail_at_len = fail_at_len

    def step_batch(self, queries):
        for q in queries:
            if len(q.prefix.ids) >= self.fail_at_len:
                raise RuntimeError("synthetic scorer failure")
        return super().step_batch(queries)


# ---------------------------------------------------------------------------
# Mock wire server
# ---------------------------------------------------------------------------


class MockWireServer:
    """In-process HTTP server speaking the step protocol.

    The served distribution for a query is a hash of its prefix tokens, so
    tests can verify that response i really answers query i.  Behavior
    knobs simulate misbehaving or flaky servers.
    """

    def __init__(
        self,
        vocab_size: int = 16,
        protocol: int = 1,
        wrong_length_for: int | None = None,
        unnormalized_for: int | None = None,
        fail_first: int = 0,
        fail_status: int = 503,
    ):
        self.vocab_size = vocab_size
        self.protocol = protocol
        self.wrong_length_for = wrong_length_for
        self.unnormalized_for = unnormalized_for
        self.fail_first = fail_first
        self.fail_status = fail_status
        self.requests_seen = 0
        self.step_calls = 0
        self._lock = threading.Lock()

        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status: int, payload: dict):
                body = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path != "/v1/meta":
                    self._send(404, {"error": "not found"})
                    return
                self._send(
                    200,
                    {
                        "protocol": mock.protocol,
                        "vocab_size": mock.vocab_size,
                        "model": "mock",
                        "languages": ["aa", "bb", "cc"],
                    },
                )

            def do_POST(self):
                with mock._lock:
                    mock.requests_seen += 1
                    if mock.fail_first > 0:
                        mock.fail_first -= 1
                        self._send(mock.fail_status, {"error": "transient"})
                        return
                    mock.step_calls += 1
                length = int(self.headers.get("Content-Length", 0))
                data = json.loads(self.rfile.read(length))
                if self.path != "/v1/step" or "queries" not in data:
                    self._send(400, {"error": "bad request"})
                    return
                rows = []
                for i, q in enumerate(data["queries"]):
                    row = mock.expected_logprobs(q).tolist()
                    if mock.wrong_length_for == i:
                        row = row[:-1]
                    if mock.unnormalized_for == i:
                        row = [v - 1.0 for v in row]
                    rows.append(row)
                self._send(200, {"logprobs": rows})

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.02), daemon=True
        )

    def expected_logprobs(self, query_json: dict) -> np.ndarray:
        rng = np.random.default_rng(
            _digest_seed(
                "mock",
                query_json["src_lang"],
                query_json["tgt_lang"],
                tuple(query_json.get("source_tokens") or ()),
                tuple(query_json["prefix_tokens"]),
            )
        )
        probs = rng.dirichlet(np.ones(self.vocab_size))
        logp = np.log(probs)
        # Serve an exactly renormalized vector so the client's exact
        # renormalization is a bitwise no-op on well-formed payloads.
        m = logp.max()
        return logp - (m + np.log(np.sum(np.exp(logp - m))))

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def __enter__(self) -> "MockWireServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def mock_server():
    with MockWireServer() as server:
        yield server

"""Client for remote next-token probability servers.

Protocol (version 1, JSON over HTTP, natural-log probabilities throughout):

* ``GET /v1/meta`` -> ``{"protocol": 1, "vocab_size": int, "model": str,
  "languages": [str]}``
* ``POST /v1/step`` with ``{"session": str, "queries": [{"src_lang": str,
  "tgt_lang": str, "source_tokens": [int] | null, "source_text": str |
  null, "prefix_tokens": [int]}]}`` -> ``{"logprobs": [[float64, ...],
  ...]}``, one dense vector per query, order-preserving.

Responses are validated (advertised vocab length; log-sum-exp within 1e-4
of zero, looser than the internal tolerance to absorb serialization
rounding) and then renormalized exactly.  Transport failures are retried
up to the configured count; a retried identical request cannot corrupt
ordering since each batch is a single atomic exchange.

The endpoint URL may come from the ``PIVOTENS_ENDPOINT`` environment
variable when not configured explicitly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

from .core import StepDistribution, logsumexp
from .decoder import StepQuery

PROTOCOL_VERSION = 1
WIRE_NORMALIZATION_TOL = 1e-4
ENDPOINT_ENV_VAR = "PIVOTENS_ENDPOINT"


class BackendError(Exception):
    """Transport-level failure after exhausting retries."""


class ProtocolError(Exception):
    """The server answered, but not in protocol; carries the query index."""

    def __init__(self, message: str, query_index: int | None = None):
        super().__init__(message)
        self.query_index = query_index


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    timeout_ms: int = 30000
    max_batch: int = 64
    retries: int = 2
    bearer_token: str | None = None
    session_name: str = "default"

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.max_batch < 1:
            raise ValueError("max batch size must be >= 1")
        if self.retries < 0:
            raise ValueError("retry count must be >= 0")
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))

    @staticmethod
    def url_from_env() -> str:
        url = os.environ.get(ENDPOINT_ENV_VAR)
        if not url:
            raise ValueError(f"no endpoint URL configured and {ENDPOINT_ENV_VAR} unset")
        return url


@dataclass(frozen=True)
class SessionMeta:
    protocol: int
    vocab_size: int
    model: str
    languages: tuple[str, ...]


class WireClient:
    """HTTP client for the step protocol; caches handshake metadata."""

    def __init__(self, config: EndpointConfig, http: requests.Session | None = None):
        self.config = config
        self._http = http or requests.Session()
        self._meta: SessionMeta | None = None

    @property
    def meta(self) -> SessionMeta:
        return self.handshake()

    def _headers(self) -> dict:
        if self.config.bearer_token:
            return {"Authorization": f"Bearer {self.config.bearer_token}"}
        return {}

    def _request(self, method: str, path: str, payload: dict | None = None):
        url = self.config.base_url + path
        timeout = self.config.timeout_ms / 1000.0
        last_error: Exception | None = None
        for _ in range(self.config.retries + 1):
            try:
                response = self._http.request(
                    method, url, json=payload, timeout=timeout, headers=self._headers()
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = BackendError(f"server error {response.status_code} at {path}")
                continue
            if response.status_code >= 400:
                raise ProtocolError(f"request rejected ({response.status_code}): {response.text}")
            try:
                return response.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {path}: {exc}") from exc
        raise BackendError(f"{method} {url} failed after {self.config.retries + 1} attempts: {last_error}")

    def handshake(self, refresh: bool = False) -> SessionMeta:
        """Fetch and cache session metadata; idempotent."""
        if self._meta is not None and not refresh:
            return self._meta
        data = self._request("GET", "/v1/meta")
        try:
            meta = SessionMeta(
                protocol=int(data["protocol"]),
                vocab_size=int(data["vocab_size"]),
                model=str(data["model"]),
                languages=tuple(data["languages"]),
            )
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed handshake response: {exc}") from exc
        if meta.protocol != PROTOCOL_VERSION:
            raise ProtocolError(
                f"incompatible protocol version {meta.protocol} (want {PROTOCOL_VERSION})"
            )
        self._meta = meta
        return meta

    def fetch_step_batch(self, queries: Sequence[StepQuery]) -> list[StepDistribution]:
        """One protocol exchange; at most ``max_batch`` queries, order-preserving."""
        if len(queries) > self.config.max_batch:
            raise ValueError(
                f"batch of {len(queries)} exceeds max batch size {self.config.max_batch}"
            )
        if not queries:
            return []
        meta = self.handshake()
        payload = {
            "session": self.config.session_name,
            "queries": [
                {
                    "src_lang": q.src_lang,
                    "tgt_lang": q.tgt_lang,
                    "source_tokens": list(q.source.ids),
                    "source_text": None,
                    "prefix_tokens": list(q.prefix.ids),
                }
                for q in queries
            ],
        }
        data = self._request("POST", "/v1/step", payload)
        rows = data.get("logprobs")
        if not isinstance(rows, list) or len(rows) != len(queries):
            raise ProtocolError(
                f"expected {len(queries)} logprob vectors, got "
                f"{len(rows) if isinstance(rows, list) else type(rows).__name__}"
            )
        out = []
        for index, row in enumerate(rows):
            arr = np.asarray(row, dtype=np.float64)
            if arr.ndim != 1 or arr.shape[0] != meta.vocab_size:
                raise ProtocolError(
                    f"vector length {arr.shape} does not match vocab size {meta.vocab_size}",
                    query_index=index,
                )
            if np.any(np.isnan(arr)) or np.any(arr == np.inf):
                raise ProtocolError("non-finite log-probabilities", query_index=index)
            lse = logsumexp(arr)
            if not abs(lse) <= WIRE_NORMALIZATION_TOL:
                raise ProtocolError(
                    f"distribution off by {lse} in log-sum-exp", query_index=index
                )
            out.append(StepDistribution(logprobs=arr - lse))
        return out


def handshake(endpoint: EndpointConfig) -> SessionMeta:
    return WireClient(endpoint).handshake()


def fetch_step_batch(
    endpoint: EndpointConfig | WireClient, queries: Sequence[StepQuery]
) -> list[StepDistribution]:
    client = endpoint if isinstance(endpoint, WireClient) else WireClient(endpoint)
    return client.fetch_step_batch(queries)


class WireScorer:
    """Scorer over a wire client; chunks oversized step batches transparently.

    The protocol metadata has no eos convention, so the end-of-sequence id
    is supplied by the caller (it is checkpoint-specific).
    """

    def __init__(self, client: WireClient, eos_id: int):
        self.client = client
        self._eos_id = eos_id

    @property
    def vocab_size(self) -> int:
        return self.client.meta.vocab_size

    @property
    def eos_id(self) -> int:
        return self._eos_id

    def step_batch(self, queries: Sequence[StepQuery]) -> list[StepDistribution]:
        out: list[StepDistribution] = []
        size = self.client.config.max_batch
        for start in range(0, len(queries), size):
            out.extend(self.client.fetch_step_batch(queries[start : start + size]))
        return out


# ---------------------------------------------------------------------------
# Protocol conformance checks (shared by client tests and live servers)
# ---------------------------------------------------------------------------


# Cross-batching tolerance for conformance checks: answering a query alone
# versus inside a batch may differ in the last float bits (kernel blocking
# depends on batch shape), which is orders of magnitude below the gap
# between distributions of genuinely different queries.
CONFORMANCE_ATOL = 1e-5


def verify_endpoint(
    config: EndpointConfig, probe_queries: Sequence[StepQuery]
) -> list[str]:
    """Run protocol conformance checks against a live endpoint.

    Returns a list of human-readable failures (empty means conformant):
    handshake shape and idempotence, response validity, determinism, and
    order preservation for distinguishable queries.
    """
    failures: list[str] = []
    client = WireClient(config)
    try:
        meta = client.handshake()
    except Exception as exc:
        return [f"handshake failed: {exc}"]
    if meta.vocab_size < 1:
        failures.append(f"advertised vocab size {meta.vocab_size} < 1")
    try:
        again = client.handshake(refresh=True)
        if again != meta:
            failures.append("handshake is not idempotent")
    except Exception as exc:
        failures.append(f"second handshake failed: {exc}")

    if not probe_queries:
        return failures
    try:
        first = client.fetch_step_batch(probe_queries)
    except Exception as exc:
        failures.append(f"step batch failed: {exc}")
        return failures
    if len(first) != len(probe_queries):
        failures.append("response count does not match query count")
        return failures

    # Determinism: the same batch twice must be bitwise identical.
    second = client.fetch_step_batch(probe_queries)
    for i, (a, b) in enumerate(zip(first, second)):
        if not np.array_equal(a.logprobs, b.logprobs):
            failures.append(f"query {i}: non-deterministic response")
            break

    def close(a: np.ndarray, b: np.ndarray) -> bool:
        return bool(np.allclose(a, b, rtol=0.0, atol=CONFORMANCE_ATOL))

    # The probes must be distinguishable well beyond the tolerance, or the
    # order checks below would prove nothing.
    singles = [client.fetch_step_batch([q])[0] for q in probe_queries]
    for i in range(len(singles)):
        for j in range(i + 1, len(singles)):
            if probe_queries[i] != probe_queries[j] and close(
                singles[i].logprobs, singles[j].logprobs
            ):
                failures.append(f"probe queries {i} and {j} are not distinguishable")

    # Order preservation: each query answered alone must match its batch
    # slot, including under a shuffled batch order.
    for i, (batch_row, single_row) in enumerate(zip(first, singles)):
        if not close(batch_row.logprobs, single_row.logprobs):
            failures.append(f"query {i}: batch row differs from single-query row")
            break
    order = list(reversed(range(len(probe_queries))))
    shuffled = client.fetch_step_batch([probe_queries[i] for i in order])
    for slot, original in enumerate(order):
        if not close(shuffled[slot].logprobs, singles[original].logprobs):
            failures.append("shuffled batch does not preserve per-query order")
            break
    return failures

"""Language-model backend gateway.

Two capabilities behind one handle: sampled text generation and
forced-continuation log-probability scoring.  A live handle speaks an
HTTP chat-completions-style protocol with a logprob-echo extension; a
mock handle replays a fixture file keyed by request digest, which makes
every downstream stage bit-reproducible in tests.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from . import store

log = logging.getLogger(__name__)

ENV_BACKEND_URL = "SRLM_BACKEND_URL"
ENV_BACKEND_TOKEN = "SRLM_BACKEND_TOKEN"


class GatewayError(Exception):
    """Base class for backend failures."""


class TransportError(GatewayError):
    """Request did not complete; retryable up to the configured budget."""


class BackendRefusalError(GatewayError):
    """Backend rejected the request; never retried."""


class UnsupportedCapabilityError(GatewayError):
    """Backend cannot return continuation logprobs; surfaced, never approximated."""


class MockFixtureError(GatewayError):
    """Fixture file is malformed or lacks a requested digest."""


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.2
    top_p: float = 0.9
    max_tokens: int = 8192
    n_samples: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class Completion:
    text: str
    truncated: bool = False


@dataclass(frozen=True)
class ScoreRequest:
    context: str
    continuation: str
    model_ref: str

    def __post_init__(self):
        if self.continuation == "":
            raise ValueError("continuation must be nonempty")


@dataclass(frozen=True)
class ScoreResult:
    total_logprob: float
    token_count: int


@dataclass(frozen=True)
class GatewayConfig:
    retry_budget: int = 3
    backoff_base: float = 0.25
    backoff_cap: float = 8.0
    concurrency_limit: int = 8


class RetryStats:
    """Shared retry counter; one instance per handle, thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self.retries = 0

    def record(self) -> None:
        with self._lock:
            self.retries += 1


def generation_digest(model_ref: str, request: GenerationRequest) -> str:
    payload = {
        "kind": "generate",
        "model": model_ref,
        "system": request.system_prompt,
        "user": request.user_prompt,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "max_tokens": request.max_tokens,
        "n": request.n_samples,
        "seed": request.seed,
    }
    return store.sha256_text(json.dumps(payload, ensure_ascii=False, sort_keys=True,
                                        separators=(",", ":")))


def score_digest(request: ScoreRequest) -> str:
    payload = {
        "kind": "score",
        "model": request.model_ref,
        "context": request.context,
        "continuation": request.continuation,
    }
    return store.sha256_text(json.dumps(payload, ensure_ascii=False, sort_keys=True,
                                        separators=(",", ":")))


class _MockBackend:
    """Replays fixture records; internally synchronized."""

    def __init__(self, fixture_path: str | Path):
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        self._fail_remaining: dict[str, int] = {}
        with open(fixture_path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if raw.strip() == "":
                    continue
                try:
                    record = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise MockFixtureError(f"fixture line {lineno}: invalid JSON") from exc
                digest = record.get("request_digest")
                if not isinstance(digest, str) or digest == "":
                    raise MockFixtureError(f"fixture line {lineno}: missing request_digest")
                if digest in self._records:
                    raise MockFixtureError(f"fixture line {lineno}: duplicate digest {digest}")
                self._records[digest] = record
                fail_times = record.get("fail_times", 0)
                if fail_times:
                    self._fail_remaining[digest] = int(fail_times)

    def _lookup(self, digest: str) -> dict:
        with self._lock:
            record = self._records.get(digest)
            if record is None:
                raise MockFixtureError(f"no fixture record for request digest {digest}")
            remaining = self._fail_remaining.get(digest, 0)
            if remaining > 0:
                self._fail_remaining[digest] = remaining - 1
                raise TransportError(f"scripted transport failure for {digest[:12]}..")
            return record

    def generate(self, digest: str, n_samples: int) -> list[Completion]:
        record = self._lookup(digest)
        completions = record.get("completions")
        if not isinstance(completions, list) or len(completions) != n_samples:
            raise MockFixtureError(
                f"fixture for {digest[:12]}.. scripts "
                f"{len(completions) if isinstance(completions, list) else 0} completions, "
                f"request wants {n_samples}"
            )
        truncated = record.get("truncated", [False] * n_samples)
        return [Completion(text=t, truncated=bool(f)) for t, f in zip(completions, truncated)]

    def score(self, digest: str) -> list[float]:
        record = self._lookup(digest)
        logprobs = record.get("logprobs")
        if not isinstance(logprobs, list) or not logprobs or not isinstance(logprobs[0], list):
            raise UnsupportedCapabilityError(f"fixture for {digest[:12]}.. scripts no logprobs")
        return [float(v) for v in logprobs[0]]


class _LiveBackend:
    """HTTP client for a serving stack; endpoints are relative to the base URL."""

    def __init__(self, endpoint: str, token: str):
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(base_url=endpoint, headers=headers, timeout=120.0)

    def _post(self, path: str, payload: dict) -> httpx.Response:
        try:
            response = self._client.post(path, json=payload)
        except httpx.HTTPError as exc:
            raise TransportError(f"POST {path}: {exc}") from exc
        if response.status_code >= 500:
            raise TransportError(f"POST {path}: status {response.status_code}")
        return response

    def generate(self, model_ref: str, request: GenerationRequest) -> list[Completion]:
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": request.user_prompt})
        payload = {
            "model": model_ref,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "n": request.n_samples,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        response = self._post("/v1/chat/completions", payload)
        if response.status_code >= 400:
            raise BackendRefusalError(f"generation refused: status {response.status_code}")
        choices = response.json().get("choices", [])
        if len(choices) != request.n_samples:
            raise TransportError(
                f"backend returned {len(choices)} choices, requested {request.n_samples}"
            )
        return [
            Completion(text=c.get("text", ""), truncated=c.get("finish_reason") == "length")
            for c in choices
        ]

    def score(self, model_ref: str, request: ScoreRequest) -> list[float]:
        payload = {
            "model": model_ref,
            "context": request.context,
            "continuation": request.continuation,
        }
        response = self._post("/v1/score", payload)
        if response.status_code == 404:
            raise UnsupportedCapabilityError("backend has no scoring endpoint")
        if response.status_code >= 400:
            raise BackendRefusalError(f"scoring refused: status {response.status_code}")
        body = response.json()
        if "token_logprobs" not in body:
            raise UnsupportedCapabilityError("backend response lacks token_logprobs")
        return [float(v) for v in body["token_logprobs"]]


@dataclass
class BackendHandle:
    """A callable model reference plus transport plumbing.

    Handles derived with ``with_model`` share the underlying transport,
    concurrency budget, and retry stats.
    """

    kind: str
    model_ref: str
    endpoint: str = ""
    token_env: str = ENV_BACKEND_TOKEN
    fixture_path: str | None = None
    config: GatewayConfig = field(default_factory=GatewayConfig)
    backend: object = field(default=None, repr=False)
    semaphore: threading.Semaphore = field(default=None, repr=False)
    stats: RetryStats = field(default=None, repr=False)


def mock_handle(
    fixture_path: str | Path, model_ref: str, config: GatewayConfig | None = None
) -> BackendHandle:
    config = config or GatewayConfig()
    return BackendHandle(
        kind="mock",
        model_ref=model_ref,
        fixture_path=str(fixture_path),
        config=config,
        backend=_MockBackend(fixture_path),
        semaphore=threading.Semaphore(config.concurrency_limit),
        stats=RetryStats(),
    )


def live_handle(
    model_ref: str,
    endpoint: str | None = None,
    token_env: str = ENV_BACKEND_TOKEN,
    config: GatewayConfig | None = None,
) -> BackendHandle:
    endpoint = endpoint or os.environ.get(ENV_BACKEND_URL, "")
    if not endpoint:
        raise GatewayError(f"no backend endpoint: pass one or set {ENV_BACKEND_URL}")
    config = config or GatewayConfig()
    return BackendHandle(
        kind="live",
        model_ref=model_ref,
        endpoint=endpoint,
        token_env=token_env,
        config=config,
        backend=_LiveBackend(endpoint, os.environ.get(token_env, "")),
        semaphore=threading.Semaphore(config.concurrency_limit),
        stats=RetryStats(),
    )


def with_model(handle: BackendHandle, model_ref: str) -> BackendHandle:
    """Same transport, different model reference."""
    return dataclasses.replace(handle, model_ref=model_ref)


def _run_with_retries(handle: BackendHandle, call):
    retries = 0
    while True:
        try:
            with handle.semaphore:
                return call()
        except TransportError as exc:
            if retries >= handle.config.retry_budget:
                raise
            delay = min(handle.config.backoff_base * (2 ** retries), handle.config.backoff_cap)
            retries += 1
            handle.stats.record()
            log.debug("transport retry %d after %s (sleep %.2fs)", retries, exc, delay)
            if delay > 0:
                time.sleep(delay)


def generate(handle: BackendHandle, request: GenerationRequest) -> list[Completion]:
    """Sample n_samples completions; retries transport failures, order stable."""
    if handle.kind == "mock":
        digest = generation_digest(handle.model_ref, request)
        return _run_with_retries(handle, lambda: handle.backend.generate(digest, request.n_samples))
    return _run_with_retries(handle, lambda: handle.backend.generate(handle.model_ref, request))


def score_continuation(handle: BackendHandle, request: ScoreRequest) -> ScoreResult:
    """Total natural-log probability of the continuation under the context."""
    if handle.kind == "mock":
        digest = score_digest(request)
        token_logprobs = _run_with_retries(handle, lambda: handle.backend.score(digest))
    else:
        token_logprobs = _run_with_retries(
            handle, lambda: handle.backend.score(handle.model_ref, request)
        )
    if not token_logprobs:
        raise GatewayError("backend returned an empty logprob list")
    for value in token_logprobs:
        if not math.isfinite(value) or value > 0:
            raise GatewayError(f"invalid token logprob {value!r}")
    return ScoreResult(total_logprob=sum(token_logprobs), token_count=len(token_logprobs))

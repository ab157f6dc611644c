"""Clients for completion endpoints: an HTTP client speaking the common
completions wire shape, and a deterministic fixture-backed mock for offline
runs and tests."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import requests

LOGGER = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_TIMEOUT_S = 60.0
RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class TransportError(RuntimeError):
    """The endpoint could not be reached after all retries."""


class ProtocolError(RuntimeError):
    """The endpoint answered with a body we cannot interpret."""


class CapabilityError(RuntimeError):
    """The endpoint does not support the requested operation."""


class FixtureMissError(KeyError):
    """The mock has no canned response for this input."""


@dataclass
class CompletionRequest:
    prompt: str
    assistant_prefix: str | None = None
    max_tokens: int = 1024
    temperature: float = 0.0
    stop: list[str] | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def full_input(self) -> str:
        if self.assistant_prefix:
            return f"{self.prompt}\n\n{self.assistant_prefix}"
        return self.prompt


@dataclass
class ContinuationScore:
    continuation: str
    log_probability: float


@dataclass
class ClientConfig:
    endpoint_url: str = ""
    model_name: str = ""
    auth_token_env: str = ""
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    timeout_s: float = DEFAULT_TIMEOUT_S
    retries: int = DEFAULT_RETRIES

    @classmethod
    def from_json(cls, doc: dict) -> "ClientConfig":
        return cls(**{k: v for k, v in doc.items() if k in cls.__dataclass_fields__})


def prompt_key(text: str) -> str:
    """Stable fixture key for an input text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class TranscriptWriter:
    """Appends one JSON line per request/response so any run can be replayed."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._index = 0
        if self.path:
            self.path.write_text("", encoding="utf-8")

    def log(self, kind: str, request: dict, response) -> int:
        with self._lock:
            index = self._index
            self._index += 1
            if self.path:
                entry = {"index": index, "kind": kind, "request": request, "response": response}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")
        return index


class HttpCompletionClient:
    """Talks to a completions endpoint with bounded concurrency and retries."""

    def __init__(
        self,
        config: ClientConfig,
        session=None,
        sleep=time.sleep,
        transcript: TranscriptWriter | None = None,
    ):
        if not config.endpoint_url:
            raise ValueError("endpoint_url must be configured")
        self.config = config
        self.session = session or requests.Session()
        self.sleep = sleep
        self.transcript = transcript or TranscriptWriter(None)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.auth_token_env, "") if self.config.auth_token_env else ""
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, payload: dict) -> dict:
        url = self.config.endpoint_url.rstrip("/") + "/completions"
        last_error: Exception | None = None
        for attempt in range(self.config.retries):
            try:
                response = self.session.post(
                    url, json=payload, headers=self._headers(), timeout=self.config.timeout_s
                )
            except requests.RequestException as exc:
                last_error = exc
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise ProtocolError(f"{url}: non-JSON response body") from exc
                if response.status_code not in RETRYABLE_STATUS:
                    raise ProtocolError(f"{url}: HTTP {response.status_code}")
                last_error = RuntimeError(f"HTTP {response.status_code}")
            if attempt + 1 < self.config.retries:
                self.sleep(0.5 * 2**attempt)
        raise TransportError(f"{url}: exhausted {self.config.retries} attempts ({last_error})")

    def complete(self, request: CompletionRequest) -> str:
        payload = {
            "model": self.config.model_name,
            "prompt": request.full_input(),
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            payload["stop"] = request.stop
        body = self._post(payload)
        try:
            text = body["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("completion response missing choices[0].text") from exc
        self.transcript.log(
            "complete", {"endpoint": self.config.endpoint_url, **payload}, text
        )
        return text

    def score_continuations(
        self, prompt: str, continuations: list[str]
    ) -> list[ContinuationScore]:
        if not continuations:
            raise ValueError("continuations must be non-empty")
        scores = []
        for continuation in continuations:
            payload = {
                "model": self.config.model_name,
                "prompt": prompt + continuation,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
            }
            body = self._post(payload)
            try:
                lp = body["choices"][0]["logprobs"]
                token_logprobs = lp["token_logprobs"]
                offsets = lp["text_offset"]
            except (KeyError, IndexError, TypeError) as exc:
                raise CapabilityError(
                    "endpoint response carries no per-token log probabilities"
                ) from exc
            total = sum(
                logprob
                for logprob, offset in zip(token_logprobs, offsets)
                if offset >= len(prompt) and logprob is not None
            )
            self.transcript.log(
                "score", {"endpoint": self.config.endpoint_url, **payload}, total
            )
            scores.append(ContinuationScore(continuation, float(total)))
        return scores

    def map_completions(self, requests_: list[CompletionRequest]) -> list[str]:
        """Run requests through a bounded pool; results keep request order."""
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(self.complete, requests_))


class MockClient:
    """Offline client returning canned completions and continuation scores
    keyed by input-text hash; misses fail loudly instead of fabricating."""

    def __init__(self, fixtures: dict | str | Path, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT):
        if not isinstance(fixtures, dict):
            fixtures = json.loads(Path(fixtures).read_text(encoding="utf-8"))
        self.completions: dict[str, str] = dict(fixtures.get("completions", {}))
        self.scores: dict[str, dict[str, float]] = dict(fixtures.get("scores", {}))
        self.max_in_flight = max_in_flight
        self.transcript = TranscriptWriter(None)

    def complete(self, request: CompletionRequest) -> str:
        key = prompt_key(request.full_input())
        if key not in self.completions:
            raise FixtureMissError(f"no canned completion for prompt hash {key}")
        text = self.completions[key]
        self.transcript.log("complete", {"prompt_hash": key}, text)
        return text

    def score_continuations(
        self, prompt: str, continuations: list[str]
    ) -> list[ContinuationScore]:
        if not continuations:
            raise ValueError("continuations must be non-empty")
        key = prompt_key(prompt)
        if key not in self.scores:
            raise FixtureMissError(f"no canned scores for prompt hash {key}")
        table = self.scores[key]
        result = []
        for continuation in continuations:
            if continuation not in table:
                raise FixtureMissError(
                    f"no canned score for continuation {continuation!r} under hash {key}"
                )
            result.append(ContinuationScore(continuation, float(table[continuation])))
        return result

    def map_completions(self, requests_: list[CompletionRequest]) -> list[str]:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.complete, requests_))


def mock_client(fixtures: str | Path | dict) -> MockClient:
    return MockClient(fixtures)

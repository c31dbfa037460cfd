"""Chat-completion gateways: remote HTTP endpoint, scripted mock, cache.

This is the only module that talks to a language model. Everything above
it consumes the same small surface: build a ChatRequest, call chat(), get
a ChatResponse whose optional label_logprobs maps each requested candidate
label to the log-probability of that label as the first generated token.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import requests

logger = logging.getLogger(__name__)

_ROLES = ("system", "user", "assistant")

# Ordered below any real log-probability, so an absent label can never win
# the argmax against an observed one.
LABEL_ABSENT_LOGPROB = -1e9

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}
_MAX_ATTEMPTS = 5
_BACKOFF_BASE_SECONDS = 1.0
_DEFAULT_MAX_IN_FLIGHT = 4
_TOP_LOGPROBS = 20


class GatewayError(RuntimeError):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Network, HTTP, or auth failure that survived the retry budget."""


class LogprobsUnsupportedError(GatewayError):
    """Label log-probabilities were requested but the endpoint returns none."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"invalid role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_new_tokens: int = 256
    want_label_logprobs: bool = False
    candidate_labels: tuple[str, ...] | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request has no messages")
        for i, msg in enumerate(self.messages):
            trailing_cue = i == len(self.messages) - 1 and msg.role == "assistant"
            if not msg.content and not trailing_cue:
                raise ValueError(
                    f"message {i} ({msg.role}) is empty; only a trailing assistant cue may be"
                )
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.want_label_logprobs:
            if not self.candidate_labels:
                raise ValueError("candidate_labels required when want_label_logprobs is set")
            for label in self.candidate_labels:
                if len(label) != 1 or not label.isalpha() or label.upper() != label:
                    raise ValueError(f"candidate label {label!r} is not a single uppercase letter")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model_name: str
    label_logprobs: dict[str, float] | None = None

    def to_record(self) -> dict:
        return {
            "text": self.text,
            "model_name": self.model_name,
            "label_logprobs": self.label_logprobs,
        }

    @staticmethod
    def from_record(record: Mapping) -> "ChatResponse":
        logprobs = record.get("label_logprobs")
        return ChatResponse(
            text=record["text"],
            model_name=record["model_name"],
            label_logprobs=dict(logprobs) if logprobs is not None else None,
        )


class Gateway(Protocol):
    model_name: str

    def chat(self, req: ChatRequest) -> ChatResponse: ...


def render_messages(messages: Sequence[ChatMessage]) -> str:
    """Canonical one-string rendering, used for matching and hashing."""
    return "\n".join(f"{m.role}: {m.content}" for m in messages)


def request_key(model_name: str, req: ChatRequest) -> str:
    """Content hash identifying a request for caching purposes."""
    payload = [
        model_name,
        [[m.role, m.content] for m in req.messages],
        req.temperature,
        req.max_new_tokens,
        list(req.candidate_labels) if req.candidate_labels is not None else None,
    ]
    blob = json.dumps(payload, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _request_record(req: ChatRequest) -> dict:
    return {
        "messages": [{"role": m.role, "content": m.content} for m in req.messages],
        "temperature": req.temperature,
        "max_new_tokens": req.max_new_tokens,
        "candidate_labels": list(req.candidate_labels) if req.candidate_labels else None,
    }


def fill_candidate_logprobs(
    observed: Mapping[str, float], candidates: Sequence[str]
) -> dict[str, float]:
    """Every requested candidate gets an entry; unobserved ones get the
    absent-label sentinel."""
    return {label: float(observed.get(label, LABEL_ABSENT_LOGPROB)) for label in candidates}


# ---------------------------------------------------------------------------
# Cache


class ResponseCache:
    """Append-only JSONL store of responses keyed by request content hash.

    Writes are serialized by a lock; lookups are from an in-memory map
    loaded at open time and updated on every put.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, ChatResponse] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as f:
                for line in f:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    self._entries[record["key"]] = ChatResponse.from_record(record["response"])

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> ChatResponse | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, req: ChatRequest, response: ChatResponse) -> None:
        record = {
            "key": key,
            "request": _request_record(req),
            "response": response.to_record(),
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        line = json.dumps(record, ensure_ascii=False)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(line)
                f.write("\n")
            self._entries[key] = response


class CachingGateway:
    """Wraps any gateway with read-through caching."""

    def __init__(self, inner: Gateway, cache: ResponseCache) -> None:
        self.inner = inner
        self.cache = cache

    @property
    def model_name(self) -> str:
        return self.inner.model_name

    def chat(self, req: ChatRequest) -> ChatResponse:
        key = request_key(self.inner.model_name, req)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        response = self.inner.chat(req)
        self.cache.put(key, req, response)
        return response


# ---------------------------------------------------------------------------
# Scripted mock


@dataclass(frozen=True)
class MockRule:
    """Matches the canonical message rendering; first matching rule wins.

    ``kind`` is "exact" or "contains". ``label_logprobs`` acts like an
    endpoint's observed top list: requested candidates missing from it get
    the absent-label sentinel. A rule with no label map falls back to the
    seeded near-uniform labels while keeping its scripted text.
    """

    kind: str
    pattern: str
    text: str
    label_logprobs: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("exact", "contains"):
            raise ValueError(f"invalid matcher kind {self.kind!r}")

    def matches(self, rendered: str) -> bool:
        if self.kind == "exact":
            return rendered == self.pattern
        return self.pattern in rendered

    @staticmethod
    def from_record(record: Mapping) -> "MockRule":
        match = record["match"]
        response = record["response"]
        logprobs = response.get("label_logprobs")
        return MockRule(
            kind=match["kind"],
            pattern=match["pattern"],
            text=response.get("text", ""),
            label_logprobs=dict(logprobs) if logprobs is not None else None,
        )


def load_mock_script(path: str | Path) -> list[MockRule]:
    """Read mock rules from a JSON file holding a list of rule objects."""
    with open(path, encoding="utf-8") as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ValueError(f"{Path(path).name}: expected a JSON list of rules")
    return [MockRule.from_record(r) for r in records]


class MockGateway:
    """Deterministic scripted gateway; a pure function of (script, seed, request).

    Unmatched requests get a stable pseudo-response derived from the
    fallback seed and the request hash, with near-uniform label logprobs
    perturbed just enough to make the argmax deterministic.
    """

    def __init__(
        self,
        script: Sequence[MockRule] = (),
        fallback_seed: int = 0,
        model_name: str = "mock",
    ) -> None:
        self.script = tuple(script)
        self.fallback_seed = fallback_seed
        self.model_name = model_name
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    def _fallback_logprobs(self, key: str, candidates: Sequence[str]) -> dict[str, float]:
        rng = random.Random(f"{self.fallback_seed}:{key}")
        uniform = -math.log(len(candidates))
        return {label: uniform + rng.uniform(-0.05, 0.05) for label in candidates}

    def chat(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self._calls += 1
        rendered = render_messages(req.messages)
        key = request_key(self.model_name, req)
        text: str | None = None
        scripted_labels: dict[str, float] | None = None
        for rule in self.script:
            if rule.matches(rendered):
                text = rule.text
                scripted_labels = rule.label_logprobs
                break
        if text is None:
            text = f"mock response {key[:12]}"
        label_logprobs: dict[str, float] | None = None
        if req.want_label_logprobs:
            assert req.candidate_labels is not None
            if scripted_labels is not None:
                label_logprobs = fill_candidate_logprobs(scripted_labels, req.candidate_labels)
            else:
                label_logprobs = self._fallback_logprobs(key, req.candidate_labels)
        return ChatResponse(text=text, model_name=self.model_name, label_logprobs=label_logprobs)


def configure_mock(
    script: Sequence[MockRule], fallback_seed: int, model_name: str = "mock"
) -> MockGateway:
    return MockGateway(script=script, fallback_seed=fallback_seed, model_name=model_name)


# ---------------------------------------------------------------------------
# Remote endpoint


class HttpGateway:
    """Chat-completion endpoint speaking the common JSON protocol.

    Sends {model, messages, temperature, max_tokens [, logprobs/top_logprobs]}
    to a full endpoint URL with a bearer token taken from the environment
    variable named by ``api_key_env``. Transient failures (HTTP 429/5xx and
    transport errors) are retried with exponential backoff: attempts are
    capped at five, with sleeps of 1, 2, 4, and 8 seconds between them.
    """

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key_env: str,
        max_in_flight: int = _DEFAULT_MAX_IN_FLIGHT,
        timeout_seconds: float = 60.0,
        post: Callable = requests.post,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.endpoint = endpoint
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.timeout_seconds = timeout_seconds
        self._post = post
        self._sleeper = sleeper
        self._slots = threading.Semaphore(max_in_flight)
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    def _api_key(self) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise TransportError(f"environment variable {self.api_key_env} is not set")
        return key

    def _body(self, req: ChatRequest) -> dict:
        body: dict = {
            "model": self.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        }
        if req.want_label_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = _TOP_LOGPROBS
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def _send(self, body: dict):
        headers = {
            "Authorization": f"Bearer {self._api_key()}",
            "Content-Type": "application/json",
        }
        with self._lock:
            self._calls += 1
        return self._post(
            self.endpoint, json=body, headers=headers, timeout=self.timeout_seconds
        )

    def chat(self, req: ChatRequest) -> ChatResponse:
        body = self._body(req)
        with self._slots:
            payload = self._send_with_retries(body)
        return self._parse(payload, req)

    def _send_with_retries(self, body: dict) -> dict:
        last_detail = ""
        for attempt in range(1, _MAX_ATTEMPTS + 1):
            try:
                response = self._send(body)
            except requests.RequestException as e:
                last_detail = f"transport error: {e}"
                response = None
            if response is not None:
                status = response.status_code
                if status == 200:
                    try:
                        return response.json()
                    except ValueError as e:
                        raise TransportError(f"endpoint returned non-JSON body: {e}") from e
                last_detail = f"HTTP {status}: {getattr(response, 'text', '')[:200]}"
                if status not in _RETRYABLE_STATUS:
                    raise TransportError(f"endpoint {self.endpoint}: {last_detail}")
            if attempt < _MAX_ATTEMPTS:
                delay = _BACKOFF_BASE_SECONDS * 2 ** (attempt - 1)
                logger.warning("attempt %d failed (%s); retrying in %.0fs", attempt, last_detail, delay)
                self._sleeper(delay)
        raise TransportError(
            f"endpoint {self.endpoint}: giving up after {_MAX_ATTEMPTS} attempts ({last_detail})"
        )

    def _parse(self, payload: dict, req: ChatRequest) -> ChatResponse:
        try:
            choice = payload["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise TransportError(f"malformed endpoint response: missing {e}") from e
        label_logprobs: dict[str, float] | None = None
        if req.want_label_logprobs:
            assert req.candidate_labels is not None
            top = self._first_token_top_logprobs(choice)
            observed: dict[str, float] = {}
            for entry in top:
                token = entry.get("token", "")
                # Tokenizers usually emit the label with one leading space.
                if token.startswith(" "):
                    token = token[1:]
                if token in req.candidate_labels and token not in observed:
                    observed[token] = float(entry["logprob"])
            label_logprobs = fill_candidate_logprobs(observed, req.candidate_labels)
        return ChatResponse(text=text, model_name=self.model_name, label_logprobs=label_logprobs)

    @staticmethod
    def _first_token_top_logprobs(choice: Mapping) -> list[Mapping]:
        logprobs = choice.get("logprobs")
        if not logprobs:
            raise LogprobsUnsupportedError("endpoint returned no logprobs block")
        content = logprobs.get("content")
        if not content:
            raise LogprobsUnsupportedError("endpoint returned an empty logprobs content list")
        first = content[0]
        top = first.get("top_logprobs")
        if top is None:
            raise LogprobsUnsupportedError("endpoint returned no top_logprobs for the first token")
        entries = list(top)
        token = first.get("token")
        if token is not None and not any(e.get("token") == token for e in entries):
            entries.append({"token": token, "logprob": first.get("logprob", 0.0)})
        return entries

"""Chat-completion gateway with tool calling and record/replay cassettes.

Speaks the OpenAI-compatible chat-completions JSON dialect. Three backends
share one interface: ``HttpBackend`` talks to a live endpoint,
``RecordBackend`` wraps another backend and captures traffic into a
cassette, and ``ReplayBackend`` serves a cassette back deterministically so
the whole agent pipeline is testable offline.

Environment: ``CA_API_BASE`` (endpoint base URL), ``CA_API_KEY``
(credential), ``CA_MODEL`` (model name used in requests).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-4"
COMPLETIONS_PATH = "/chat/completions"

ENV_API_KEY = "CA_API_KEY"
ENV_API_BASE = "CA_API_BASE"
ENV_MODEL = "CA_MODEL"

RETRY_ATTEMPTS = 3
RETRY_BASE_SECONDS = 1.0
RETRY_FACTOR = 2.0


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """The endpoint could not be reached after all retries."""


class ProviderError(GatewayError):
    """The provider rejected the request (HTTP 4xx); not retryable."""

    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(f"provider rejected request (HTTP {status}): {message}")


class ReplayError(GatewayError):
    """A replayed request did not match the cassette."""


@dataclass(frozen=True)
class ToolCallRequest:
    """A function call requested by the assistant."""

    id: str
    name: str
    arguments: str

    def __post_init__(self):
        try:
            parsed = json.loads(self.arguments)
        except json.JSONDecodeError as exc:
            raise ValueError(f"tool call arguments are not valid JSON: {exc}") from exc
        if not isinstance(parsed, dict):
            raise ValueError("tool call arguments must be a JSON object")

    def parsed_arguments(self) -> dict:
        return json.loads(self.arguments)


@dataclass(frozen=True)
class ChatMessage:
    """One message in a chat conversation."""

    role: str
    content: str = ""
    tool_calls: tuple[ToolCallRequest, ...] = ()
    tool_call_id: str | None = None

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages require tool_call_id")
        if self.role != "tool" and self.tool_call_id is not None:
            raise ValueError("tool_call_id is only valid on tool messages")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("only assistant messages may carry tool calls")


@dataclass(frozen=True)
class CompletionRequest:
    """A chat-completion request; immutable so backends can never mutate it."""

    model: str
    messages: tuple[ChatMessage, ...]
    tools: tuple[dict, ...] | None = None
    temperature: float = 0.0

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be system or user")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")


def message_to_wire(message: ChatMessage) -> dict:
    wire: dict = {"role": message.role, "content": message.content}
    if message.tool_calls:
        wire["tool_calls"] = [
            {
                "id": call.id,
                "type": "function",
                "function": {"name": call.name, "arguments": call.arguments},
            }
            for call in message.tool_calls
        ]
    if message.tool_call_id is not None:
        wire["tool_call_id"] = message.tool_call_id
    return wire


def message_from_wire(wire: dict) -> ChatMessage:
    calls = tuple(
        ToolCallRequest(
            id=item["id"],
            name=item["function"]["name"],
            arguments=item["function"]["arguments"],
        )
        for item in wire.get("tool_calls") or ()
    )
    return ChatMessage(
        role=wire["role"],
        content=wire.get("content") or "",
        tool_calls=calls,
        tool_call_id=wire.get("tool_call_id"),
    )


def request_to_wire(request: CompletionRequest) -> dict:
    wire: dict = {
        "model": request.model,
        "messages": [message_to_wire(m) for m in request.messages],
        "temperature": request.temperature,
    }
    if request.tools is not None:
        wire["tools"] = list(request.tools)
    return wire


def fingerprint(request: CompletionRequest) -> str:
    """Deterministic digest of a request's semantic content.

    Covers the model name, ordered message roles and contents, and tool
    names. Credentials, endpoints, and sampling parameters are excluded so
    the same conversation fingerprints identically everywhere.
    """
    payload = [
        request.model,
        [[m.role, m.content] for m in request.messages],
        [t["function"]["name"] for t in (request.tools or ())],
    ]
    blob = json.dumps(payload, separators=(",", ":"), ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class TranscriptLog:
    """Append-only JSONL log of raw request/response pairs.

    Appends are serialized under a lock so concurrent in-flight requests
    never interleave within one entry.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, request_wire: dict, response_wire: dict) -> None:
        line = json.dumps(
            {"request": request_wire, "response": response_wire},
            separators=(",", ":"),
            ensure_ascii=False,
            sort_keys=True,
        )
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


@dataclass
class CassetteEntry:
    fingerprint: str
    request: dict
    response: dict


class Cassette:
    """Ordered request/response recording.

    In record mode entries are appended in call order. In replay mode each
    incoming request consumes the first unconsumed entry whose fingerprint
    matches, so repeated identical requests replay their distinct recorded
    responses in order, while independent conversations (e.g. concurrent
    specialist agents) may arrive in any interleaving.
    """

    def __init__(self, entries: list[CassetteEntry] | None = None, mode: str = "record"):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown cassette mode {mode!r}")
        self.mode = mode
        self.entries = entries or []
        self._consumed = [False] * len(self.entries)
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> "Cassette":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        entries = [
            CassetteEntry(item["fingerprint"], item["request"], item["response"])
            for item in raw
        ]
        return cls(entries, mode="replay")

    def save(self, path: str | Path) -> None:
        raw = [
            {"fingerprint": e.fingerprint, "request": e.request, "response": e.response}
            for e in self.entries
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(raw, fh, indent=2, ensure_ascii=False, sort_keys=True)
            fh.write("\n")

    def append(self, fp: str, request_wire: dict, response_wire: dict) -> None:
        with self._lock:
            self.entries.append(CassetteEntry(fp, request_wire, response_wire))
            self._consumed.append(False)

    def play(self, fp: str) -> dict:
        with self._lock:
            for i, entry in enumerate(self.entries):
                if not self._consumed[i] and entry.fingerprint == fp:
                    self._consumed[i] = True
                    return entry.response
            remaining = [
                e.fingerprint for i, e in enumerate(self.entries) if not self._consumed[i]
            ]
            raise ReplayError(
                f"no cassette entry matches request fingerprint {fp}; "
                f"expected one of {remaining!r}"
            )


class Backend:
    """Interface: turn a CompletionRequest into a raw response JSON object."""

    transcript: TranscriptLog | None = None

    def send(self, request: CompletionRequest) -> dict:
        raise NotImplementedError


class HttpBackend(Backend):
    """Live backend POSTing to an OpenAI-compatible chat-completions endpoint.

    Transport failures (connection errors, timeouts, HTTP 5xx) are retried
    with exponential backoff: base 1s, factor 2, at most 3 attempts. HTTP
    4xx responses are not retried and surface the provider's message.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        *,
        path: str = COMPLETIONS_PATH,
        timeout: float = 120.0,
        post=None,
        sleep=time.sleep,
    ):
        self.url = base_url.rstrip("/") + path
        self.api_key = api_key
        self.timeout = timeout
        self._post = post or requests.post
        self._sleep = sleep

    @classmethod
    def from_env(cls) -> "HttpBackend":
        base = os.environ.get(ENV_API_BASE)
        if not base:
            raise GatewayError(f"live backend requires {ENV_API_BASE} to be set")
        return cls(base, os.environ.get(ENV_API_KEY, ""))

    def send(self, request: CompletionRequest) -> dict:
        wire = request_to_wire(request)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            if attempt:
                self._sleep(RETRY_BASE_SECONDS * RETRY_FACTOR ** (attempt - 1))
            try:
                response = self._post(self.url, json=wire, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                log.warning("transport failure (attempt %d/%d): %s", attempt + 1, RETRY_ATTEMPTS, exc)
                continue
            status = response.status_code
            if 400 <= status < 500:
                raise ProviderError(status, _provider_message(response))
            if status >= 500:
                last_error = TransportError(f"HTTP {status} from provider")
                log.warning("server error (attempt %d/%d): HTTP %s", attempt + 1, RETRY_ATTEMPTS, status)
                continue
            return response.json()
        raise TransportError(f"request failed after {RETRY_ATTEMPTS} attempts: {last_error}")


def _provider_message(response) -> str:
    try:
        body = response.json()
        return body["error"]["message"]
    except Exception:
        return getattr(response, "text", "") or "no detail"


class ReplayBackend(Backend):
    """Serves recorded responses from a cassette; never touches the network."""

    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def send(self, request: CompletionRequest) -> dict:
        return self.cassette.play(fingerprint(request))


class RecordBackend(Backend):
    """Wraps another backend and appends its traffic to a cassette."""

    def __init__(self, inner: Backend, cassette: Cassette):
        self.inner = inner
        self.cassette = cassette

    def send(self, request: CompletionRequest) -> dict:
        response = self.inner.send(request)
        self.cassette.append(fingerprint(request), request_to_wire(request), response)
        return response


class ScriptedBackend(Backend):
    """Deterministic stand-in backend for tests and fixture construction.

    Returns the given assistant messages one per request, in order, wrapped
    in a provider-shaped response body.
    """

    def __init__(self, replies: list[ChatMessage]):
        self._replies = list(replies)
        self._served = 0
        self._lock = threading.Lock()

    def send(self, request: CompletionRequest) -> dict:
        with self._lock:
            if self._served >= len(self._replies):
                raise GatewayError("scripted backend exhausted")
            reply = self._replies[self._served]
            self._served += 1
        return {
            "id": f"scripted-{self._served}",
            "object": "chat.completion",
            "choices": [
                {
                    "index": 0,
                    "message": message_to_wire(reply),
                    "finish_reason": "tool_calls" if reply.tool_calls else "stop",
                }
            ],
        }


def complete(backend: Backend, request: CompletionRequest) -> ChatMessage:
    """Send one completion request and return the assistant's message."""
    raw = backend.send(request)
    try:
        wire = raw["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GatewayError(f"malformed provider response: {exc}") from exc
    message = message_from_wire(wire)
    if message.role != "assistant":
        raise GatewayError(f"expected an assistant message, got role {message.role!r}")
    if backend.transcript is not None:
        backend.transcript.append(request_to_wire(request), raw)
    return message

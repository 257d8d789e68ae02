"""Minimal chat-completions client with retries and a scripted mock transport.

Speaks the OpenAI-compatible ``POST {base_url}/chat/completions`` JSON
wire shape, with message content as a list of text / image-url parts.
Images are opaque: URLs or base64 payloads are passed through untouched.

Transports are callables ``ChatRequest -> ChatResponse`` raising
:class:`TransientFailure` for retryable conditions, so the whole pipeline
runs offline against :class:`MockTransport`.
"""

from __future__ import annotations

import os
import random
import threading
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import httpx

API_KEY_ENV = "RLVRKIT_API_KEY"

_VALID_ROLES = ("system", "user", "assistant")


class TransientFailure(Exception):
    """Retryable transport-level failure: timeout, connection error, 429/5xx."""


class TransportError(RuntimeError):
    """All retry attempts failed; ``attempts`` records what happened to each."""

    def __init__(self, message: str, attempts: List[str]):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(RuntimeError):
    """The endpoint answered, but not with a parseable chat completion."""


class MockScriptExhausted(AssertionError):
    """A scripted mock ran out of outcomes; the test script is too short."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    url: str


MessagePart = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: Tuple[MessagePart, ...]

    def __post_init__(self) -> None:
        if self.role not in _VALID_ROLES:
            raise ValueError(f"invalid role {self.role!r}")
        if self.role != "user" and any(isinstance(p, ImagePart) for p in self.parts):
            raise ValueError("image parts are only allowed in user messages")


def text_message(role: str, text: str) -> ChatMessage:
    return ChatMessage(role, (TextPart(text),))


def user_message(text: str, images: Sequence[str] = ()) -> ChatMessage:
    parts: Tuple[MessagePart, ...] = tuple(ImagePart(url) for url in images)
    return ChatMessage("user", parts + (TextPart(text),))


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: Tuple[ChatMessage, ...]
    temperature: float = 1.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def to_payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [
                {
                    "role": m.role,
                    "content": [
                        {"type": "text", "text": p.text}
                        if isinstance(p, TextPart)
                        else {"type": "image_url", "image_url": {"url": p.url}}
                        for p in m.parts
                    ],
                }
                for m in self.messages
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ChatRequest":
        messages = []
        for m in payload["messages"]:
            content = m["content"]
            if isinstance(content, str):
                parts: Tuple[MessagePart, ...] = (TextPart(content),)
            else:
                parts = tuple(
                    TextPart(p["text"])
                    if p["type"] == "text"
                    else ImagePart(p["image_url"]["url"])
                    for p in content
                )
            messages.append(ChatMessage(m["role"], parts))
        return cls(
            model=payload["model"],
            messages=tuple(messages),
            temperature=payload.get("temperature", 1.0),
            max_tokens=payload.get("max_tokens", 2048),
        )

    def text(self) -> str:
        """All text parts joined; convenient for asserting prompt contents."""
        return "\n".join(
            p.text for m in self.messages for p in m.parts if isinstance(p, TextPart)
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    usage: Optional[dict] = None


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 30.0
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be at least 1")


class HttpTransport:
    """POSTs chat requests to an OpenAI-compatible endpoint."""

    def __init__(self, cfg: EndpointConfig, http: Optional[httpx.Client] = None):
        self._cfg = cfg
        self._http = http or httpx.Client(timeout=cfg.timeout)

    def __call__(self, req: ChatRequest) -> ChatResponse:
        headers = {}
        api_key = os.environ.get(API_KEY_ENV) or self._cfg.api_key
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        url = self._cfg.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._http.post(url, json=req.to_payload(), headers=headers)
        except httpx.TimeoutException as exc:
            raise TransientFailure(f"timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransientFailure(f"connection error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientFailure(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
            if content is None:
                content = ""
            return ChatResponse(
                content=content,
                finish_reason=choice.get("finish_reason", "stop"),
                usage=body.get("usage"),
            )
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed response body: {exc}") from exc


MockOutcome = Union[str, ChatResponse, Exception]


class MockTransport:
    """Deterministic transport that replays a script of canned outcomes.

    Each call consumes the next outcome in order: a string becomes a
    successful response with that content, a ChatResponse is returned
    as-is, and an Exception instance is raised (use TransientFailure to
    exercise the retry path).  Records every request plus the peak number
    of concurrent calls for instrumentation.
    """

    def __init__(self, script: Sequence[MockOutcome], delay: float = 0.0):
        self._script = list(script)
        self._delay = delay
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0
        self.calls = 0
        self.requests: List[ChatRequest] = []

    def remaining(self) -> int:
        with self._lock:
            return len(self._script)

    def __call__(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
            self.calls += 1
            self.requests.append(req)
            if not self._script:
                self._in_flight -= 1
                raise MockScriptExhausted(
                    f"mock script exhausted after {self.calls - 1} outcomes"
                )
            outcome = self._script.pop(0)
        try:
            if self._delay:
                time.sleep(self._delay)
            if isinstance(outcome, Exception):
                raise outcome
            if isinstance(outcome, ChatResponse):
                return outcome
            return ChatResponse(content=outcome)
        finally:
            with self._lock:
                self._in_flight -= 1


def install_mock(script: Sequence[MockOutcome], delay: float = 0.0) -> MockTransport:
    """Build a scripted transport handle to pass into a :class:`ChatClient`."""
    return MockTransport(script, delay=delay)


class ChatClient:
    """Retrying client over a transport, with a per-endpoint admission gate.

    At most ``cfg.max_concurrency`` logical requests are in flight at a
    time; the gate is held across the retries of one request.  Backoff is
    exponential with jitter, ``backoff_base`` doubling up to
    ``backoff_cap``.  The sleeper is injectable so tests never wait.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        transport: Optional[Callable[[ChatRequest], ChatResponse]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._cfg = cfg
        self._transport = transport if transport is not None else HttpTransport(cfg)
        self._gate = threading.BoundedSemaphore(cfg.max_concurrency)
        self._sleep = sleep
        self._jitter = random.Random(0)
        self._jitter_lock = threading.Lock()

    @property
    def config(self) -> EndpointConfig:
        return self._cfg

    def backoff_delay(self, attempt: int) -> float:
        base = min(self._cfg.backoff_cap, self._cfg.backoff_base * (2**attempt))
        with self._jitter_lock:
            return base * self._jitter.uniform(0.5, 1.0)

    def complete(self, req: ChatRequest) -> ChatResponse:
        attempts: List[str] = []
        with self._gate:
            for attempt in range(self._cfg.max_retries + 1):
                try:
                    return self._transport(req)
                except TransientFailure as exc:
                    attempts.append(f"attempt {attempt + 1}: {exc}")
                    if attempt < self._cfg.max_retries:
                        self._sleep(self.backoff_delay(attempt))
        raise TransportError(
            f"request failed after {len(attempts)} attempts", attempts
        )


def chat_complete(
    req: ChatRequest,
    cfg: EndpointConfig,
    transport: Optional[Callable[[ChatRequest], ChatResponse]] = None,
) -> ChatResponse:
    """One-shot convenience wrapper around :class:`ChatClient`."""
    return ChatClient(cfg, transport=transport).complete(req)

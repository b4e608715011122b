"""Chat-completion client used for the policy, annotator, and verifier.

A :class:`Backend` wraps a transport (HTTP or scripted mock) with capability
checks, a sliding-window rate cap, and exponential backoff. Time is read
through a clock object so tests can drive backoff and rate limiting with a
:class:`VirtualClock` instead of sleeping.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import mimetypes
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from a2l.errors import (
    BackendError,
    CapabilityMissing,
    MissingPath,
    ProtocolError,
    RateLimited,
    ScriptExhausted,
    ServerError,
    Timeout,
    Unauthorized,
)

log = logging.getLogger(__name__)

DEFAULT_KEY_ENV = "A2L_API_KEY"


# --- wire model -----------------------------------------------------------


@dataclass(frozen=True)
class Part:
    """One piece of message content.

    kind is "text", "image" (``content`` is a locator: path, URL, or data URI),
    or "document" (``content`` is inline text attached as a file named ``name``).
    """

    kind: str
    content: str
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("text", "image", "document"):
            raise ValueError(f"unknown part kind {self.kind!r}")


def text(s: str) -> Part:
    return Part("text", s)


def image(locator: str) -> Part:
    return Part("image", locator)


def document(content: str, name: str = "attachment.txt") -> Part:
    return Part("document", content, name)


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def text(self) -> str:
        return "\n".join(p.content for p in self.parts if p.kind in ("text", "document"))


def user(*parts: Part) -> Message:
    return Message("user", parts)


def assistant(s: str) -> Message:
    return Message("assistant", (text(s),))


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 1024
    want_logprobs: bool = False
    forced_completion: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")

    def has_images(self) -> bool:
        return any(p.kind == "image" for m in self.messages for p in m.parts)

    def all_text(self) -> str:
        chunks = [m.text for m in self.messages]
        if self.forced_completion is not None:
            chunks.append(self.forced_completion)
        return "\n".join(chunks)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    logprobs: tuple[float, ...] | None = None
    attempts: int = 1
    latency: float = 0.0


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = DEFAULT_KEY_ENV
    timeout: float = 120.0
    max_retries: int = 3
    rpm_cap: int | None = None
    images: bool = True
    logprobs: bool = False
    family: str = "chat"
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    asset_root: str = "."

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.family not in ("chat", "completions"):
            raise ValueError(f"unknown endpoint family {self.family!r}")


# --- clocks and pacing -----------------------------------------------------


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Clock that only moves when someone sleeps on it."""

    def __init__(self, start: float = 0.0):
        self._t = start
        self._lock = threading.Lock()
        self.sleeps: list[float] = []

    def now(self) -> float:
        with self._lock:
            return self._t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self.sleeps.append(seconds)
            if seconds > 0:
                self._t += seconds


def backoff_delays(base: float, cap: float, retries: int) -> list[float]:
    return [min(cap, base * 2**k) for k in range(retries)]


class RateLimiter:
    """At most ``cap`` acquisitions in any trailing ``window`` seconds."""

    def __init__(self, cap: int | None, clock: Clock, window: float = 60.0):
        self.cap = cap
        self.clock = clock
        self.window = window
        self.issued: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.cap:
            return
        with self._lock:
            while True:
                now = self.clock.now()
                while self.issued and self.issued[0] <= now - self.window:
                    self.issued.popleft()
                if len(self.issued) < self.cap:
                    self.issued.append(now)
                    return
                self.clock.sleep(self.issued[0] + self.window - now)


# --- transports ------------------------------------------------------------


class Transport(Protocol):
    def send(self, req: ChatRequest, cfg: BackendConfig) -> ChatResponse: ...


def _image_url(locator: str, root: str) -> str:
    if re.match(r"^(https?|data):", locator):
        return locator
    path = Path(root) / locator
    if not path.exists():
        raise MissingPath(path)
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64,{base64.b64encode(path.read_bytes()).decode('ascii')}"


def chat_payload(req: ChatRequest, cfg: BackendConfig) -> dict:
    messages = []
    for m in req.messages:
        content = []
        for p in m.parts:
            if p.kind == "text":
                content.append({"type": "text", "text": p.content})
            elif p.kind == "document":
                content.append({"type": "text", "text": f"[attached file {p.name}]\n{p.content}"})
            else:
                content.append({"type": "image_url", "image_url": {"url": _image_url(p.content, cfg.asset_root)}})
        messages.append({"role": m.role, "content": content})
    body = {
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "top_p": req.top_p,
        "max_tokens": req.max_tokens,
    }
    if req.want_logprobs:
        body["logprobs"] = True
    return body


def flatten_prompt(req: ChatRequest) -> str:
    return "".join(f"{m.role}: {m.text}\n" for m in req.messages) + "assistant: "


def completions_payload(req: ChatRequest) -> dict:
    prompt = flatten_prompt(req)
    body = {"model": req.model, "temperature": req.temperature, "top_p": req.top_p}
    if req.forced_completion is not None:
        body.update(prompt=prompt + req.forced_completion, max_tokens=0, echo=True, logprobs=1)
    else:
        body.update(prompt=prompt, max_tokens=req.max_tokens)
        if req.want_logprobs:
            body["logprobs"] = 1
    return body


class HttpTransport:
    """Talks to an OpenAI-compatible server (``/chat/completions`` or ``/completions``)."""

    def __init__(self, client: httpx.Client | None = None):
        self.client = client or httpx.Client()

    def send(self, req: ChatRequest, cfg: BackendConfig) -> ChatResponse:
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise Unauthorized(f"credential environment variable {cfg.api_key_env} is not set")
        if cfg.family == "chat":
            if req.forced_completion is not None:
                raise CapabilityMissing("scoring a forced completion needs the completions endpoint family")
            url, body = cfg.endpoint.rstrip("/") + "/chat/completions", chat_payload(req, cfg)
        else:
            url, body = cfg.endpoint.rstrip("/") + "/completions", completions_payload(req)
        try:
            r = self.client.post(url, json=body, headers={"Authorization": f"Bearer {key}"}, timeout=cfg.timeout)
        except httpx.TimeoutException as exc:
            raise Timeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise ServerError(str(exc)) from exc
        if r.status_code in (401, 403):
            raise Unauthorized(r.text[:200])
        if r.status_code == 429:
            raise RateLimited(r.text[:200])
        if r.status_code >= 500:
            raise ServerError(f"HTTP {r.status_code}: {r.text[:200]}")
        if r.status_code != 200:
            raise ProtocolError(f"HTTP {r.status_code}: {r.text}")
        try:
            data = r.json()
            if cfg.family == "chat":
                return self._parse_chat(data)
            return self._parse_completions(data, req)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(r.text) from exc

    @staticmethod
    def _parse_chat(data: dict) -> ChatResponse:
        choice = data["choices"][0]
        content = choice["message"]["content"]
        if content is None:
            raise ValueError("null content")
        lps = None
        if choice.get("logprobs") and choice["logprobs"].get("content"):
            lps = tuple(float(t["logprob"]) for t in choice["logprobs"]["content"])
        usage = data.get("usage") or {}
        return ChatResponse(
            text=content,
            finish_reason=choice.get("finish_reason") or "stop",
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            logprobs=lps,
        )

    @staticmethod
    def _parse_completions(data: dict, req: ChatRequest) -> ChatResponse:
        choice = data["choices"][0]
        usage = data.get("usage") or {}
        lp = choice.get("logprobs")
        lps = None
        if lp:
            tokens = lp["token_logprobs"]
            if req.forced_completion is not None:
                cut = len(flatten_prompt(req))
                offsets = lp["text_offset"]
                tokens = [t for t, off in zip(tokens, offsets) if off >= cut]
            lps = tuple(float(t) for t in tokens if t is not None)
        return ChatResponse(
            text=choice.get("text") or "",
            finish_reason=choice.get("finish_reason") or "stop",
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            logprobs=lps,
        )


_FAILURES = {
    "timeout": Timeout,
    "rate_limited": RateLimited,
    "server_error": ServerError,
    "unauthorized": Unauthorized,
    "protocol": ProtocolError,
}

_MOCK_TOKEN = re.compile(r"<unused\d+>|\d|[A-Za-z]+|\s+|.", re.S)


def mock_tokens(s: str) -> list[str]:
    return _MOCK_TOKEN.findall(s)


@dataclass
class ScriptEntry:
    """One scripted reply.

    ``match`` is a substring (or predicate) tested against the request text;
    None matches anything. Exactly one of ``response`` or ``failure`` is set.
    """

    match: str | Callable[[ChatRequest], bool] | None = None
    response: str | None = None
    failure: str | None = None
    logprobs: Sequence[float] | None = None
    token_logprob: float | None = None
    latency: float = 0.0
    repeat: bool = False
    used: bool = field(default=False, repr=False)

    def __post_init__(self):
        if (self.response is None) == (self.failure is None):
            raise ValueError("script entry needs exactly one of response or failure")
        if self.failure is not None and self.failure not in _FAILURES:
            raise ValueError(f"unknown failure kind {self.failure!r}")

    def matches(self, req: ChatRequest) -> bool:
        if self.match is None:
            return True
        if callable(self.match):
            return bool(self.match(req))
        return self.match in req.all_text()

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptEntry":
        allowed = {"match", "response", "failure", "logprobs", "token_logprob", "latency", "repeat"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown script keys: {sorted(unknown)}")
        return cls(**d)


class MockTransport:
    """Deterministic scripted transport; records every request it receives."""

    def __init__(self, script: Sequence[ScriptEntry], clock: Clock | None = None):
        if not script:
            raise ValueError("mock script is empty")
        self.script = [replace(e, used=False) for e in script]
        self.clock = clock
        self.transcript: list[ChatRequest] = []
        self._lock = threading.Lock()

    def send(self, req: ChatRequest, cfg: BackendConfig) -> ChatResponse:
        with self._lock:
            self.transcript.append(req)
            entry = next((e for e in self.script if (e.repeat or not e.used) and e.matches(req)), None)
            if entry is None:
                raise ScriptExhausted(f"no scripted reply left for call {len(self.transcript)}")
            entry.used = True
        if self.clock is not None and entry.latency:
            self.clock.sleep(entry.latency)
        if entry.failure is not None:
            raise _FAILURES[entry.failure](f"scripted {entry.failure}")
        lps = None
        if req.want_logprobs:
            if entry.logprobs is not None:
                lps = tuple(float(x) for x in entry.logprobs)
            elif entry.token_logprob is not None:
                target = req.forced_completion if req.forced_completion is not None else entry.response
                lps = tuple(float(entry.token_logprob) for _ in mock_tokens(target))
        return ChatResponse(
            text=entry.response,
            prompt_tokens=len(mock_tokens(req.all_text())),
            completion_tokens=len(mock_tokens(entry.response)),
            logprobs=lps,
        )


# --- client ----------------------------------------------------------------


class Backend:
    """Shareable client handle: capability checks, rate cap, retry with backoff."""

    def __init__(self, transport: Transport, cfg: BackendConfig | None = None, clock: Clock | None = None):
        self.transport = transport
        self.cfg = cfg or BackendConfig()
        self.clock = clock or SystemClock()
        self.limiter = RateLimiter(self.cfg.rpm_cap, self.clock)

    @property
    def transcript(self) -> list[ChatRequest]:
        return getattr(self.transport, "transcript", [])

    def complete(self, req: ChatRequest) -> ChatResponse:
        if req.has_images() and not self.cfg.images:
            raise CapabilityMissing("backend is configured without image support")
        if req.want_logprobs and not self.cfg.logprobs:
            raise CapabilityMissing("backend is configured without log-probability support")
        delays = backoff_delays(self.cfg.backoff_base, self.cfg.backoff_max, self.cfg.max_retries)
        attempt = 0
        while True:
            attempt += 1
            self.limiter.acquire()
            t0 = self.clock.now()
            try:
                resp = self.transport.send(req, self.cfg)
            except BackendError as exc:
                if not exc.transient or attempt > self.cfg.max_retries:
                    raise
                delay = delays[attempt - 1]
                log.warning("attempt %d failed (%s); retrying in %.2fs", attempt, exc, delay)
                self.clock.sleep(delay)
                continue
            if resp.text is None:
                raise ProtocolError("response text is null")
            return replace(resp, attempts=attempt, latency=self.clock.now() - t0)


def complete(backend: Backend, req: ChatRequest) -> ChatResponse:
    return backend.complete(req)


def score_completion(
    backend: Backend, messages: Sequence[Message], completion: str, model: str | None = None
) -> tuple[tuple[float, ...], float]:
    """Per-token log-probabilities of ``completion`` as a forced continuation, and their mean."""
    if not backend.cfg.logprobs:
        raise CapabilityMissing("backend is configured without log-probability support")
    if not completion:
        raise ValueError("nothing to score: completion is empty")
    req = ChatRequest(
        model=model or backend.cfg.model,
        messages=tuple(messages),
        temperature=0.0,
        max_tokens=0,
        want_logprobs=True,
        forced_completion=completion,
    )
    resp = backend.complete(req)
    if not resp.logprobs:
        raise ProtocolError("backend returned no log-probabilities")
    lps = resp.logprobs
    return lps, math.fsum(lps) / len(lps)


def make_mock(
    script: Sequence[ScriptEntry | dict],
    cfg: BackendConfig | None = None,
    clock: Clock | None = None,
) -> Backend:
    clock = clock or VirtualClock()
    entries = [e if isinstance(e, ScriptEntry) else ScriptEntry.from_dict(e) for e in script]
    return Backend(MockTransport(entries, clock), cfg or BackendConfig(model="mock", logprobs=True), clock)


def load_mock_script(path) -> list[ScriptEntry]:
    p = Path(path)
    if not p.exists():
        raise MissingPath(p)
    data = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{p}: mock script must be a JSON array")
    return [ScriptEntry.from_dict(d) for d in data]

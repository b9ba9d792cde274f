"""Uniform chat-completion interface over pluggable backends.

One gateway instance serves every pipeline stage. Each registered backend
gets its own concurrency bound, sliding-window rate limit, retry policy,
and record/replay cache, so a full corpus build can be replayed offline as
a pure function of (inputs, seed, cache contents).

Cache keys are content digests over the canonicalized request (whitespace-
normalized message contents), which keeps prompt-template cosmetics from
invalidating recorded responses.

Prompts embed their machine-readable payload between sentinel lines
(``<<<NAME`` ... ``NAME>>>``). The mock backend recognizes the pipeline
step from ``request_tag`` and answers with structurally valid output for
that step, derived deterministically from the request digest, so every
downstream parser can be exercised end to end without network access.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence, TypeVar

import httpx

from .errors import DuplicateBackendError, ReplayMissError, TransportError

T = TypeVar("T")
U = TypeVar("U")


class MsgRole(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: MsgRole
    content: str


@dataclass(frozen=True)
class ChatRequest:
    backend_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    request_tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request has no messages")
        if self.messages[0].role is MsgRole.ASSISTANT:
            raise ValueError("first message must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def last_user_content(self) -> str:
        for msg in reversed(self.messages):
            if msg.role is MsgRole.USER:
                return msg.content
        return self.messages[-1].content


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: FinishReason = FinishReason.STOP
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cached: bool = False
    timestamp: float = 0.0

    def __post_init__(self):
        if self.finish_reason is FinishReason.STOP and not self.content:
            raise ValueError("stop response with empty content")


class CacheMode(str, Enum):
    OFF = "off"
    RECORD = "record"
    REPLAY = "replay"
    REPLAY_THEN_RECORD = "replay_then_record"


class BackendKind(str, Enum):
    HTTP_CHAT = "http_chat"
    MOCK = "mock"


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: BackendKind
    endpoint: str = ""
    model: str = ""
    max_concurrency: int = 4
    requests_per_minute: int = 600
    max_retries: int = 3
    cache_mode: CacheMode = CacheMode.OFF
    cache_dir: str = ""
    # Credentials come from the environment only, never from config values.
    api_key_env: str = ""

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")
        if self.kind is BackendKind.HTTP_CHAT and not self.endpoint.startswith(("http://", "https://")):
            raise ValueError(f"backend {self.backend_id!r}: malformed endpoint {self.endpoint!r}")


def _normalize_ws(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def request_digest(request: ChatRequest) -> str:
    """Stable content digest of a canonicalized request."""
    canon = {
        "backend_id": request.backend_id,
        "messages": [{"role": m.role.value, "content": _normalize_ws(m.content)} for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    payload = json.dumps(canon, ensure_ascii=False, separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --- prompt payload blocks ------------------------------------------------

def format_block(name: str, text: str) -> str:
    return f"<<<{name}\n{text}\n{name}>>>"


def extract_block(text: str, name: str) -> str | None:
    match = re.search(rf"<<<{name}\n(.*?)\n{name}>>>", text, flags=re.DOTALL)
    return match.group(1) if match else None


# --- backends -------------------------------------------------------------

class TransportFailure(Exception):
    """Retryable backend failure (network error, 429, 5xx)."""


# Pipeline step tags the mock backend understands.
TAG_RECONSTRUCT = "reconstruct"
TAG_KGQA_STEP1 = "kgqa_step1"
TAG_KGQA_STEP2 = "kgqa_step2"
TAG_PREFERENCE = "preference_generate"
TAG_OPEN_QUESTION = "open_question"
TAG_PATIENT_TURN = "patient_turn"
TAG_DOCTOR_REPLY = "doctor_reply"
TAG_JUDGE = "judge"
TAG_MCQ_ANSWER = "mcq_answer"
TAG_MCQA_REFINE = "mcqa_refine"
TAG_TRANSLATE = "translate"

MALFORM_MARKER = "[[MALFORM]]"
_JUDGE_MARKER = re.compile(r"\[\[JUDGE:([0-9]+),([0-9]+),([0-9]+),([0-9]+)\]\]")


class MockBackend:
    """Deterministic offline backend: a pure function of the request.

    Output is structurally valid for the pipeline step named by
    ``request_tag``, so parsers downstream see realistic shapes. Two
    markers steer failure-path tests: ``[[MALFORM]]`` anywhere in the last
    user message yields unparseable output, and ``[[JUDGE:a,b,c,d]]``
    forces those four verdict numbers.
    """

    def complete(self, request: ChatRequest) -> ChatResponse:
        # Scan the whole non-assistant side so markers and payload blocks
        # survive a corrective retry turn appended after the original prompt.
        prompt = "\n".join(m.content for m in request.messages if m.role is not MsgRole.ASSISTANT)
        digest = request_digest(request)
        if MALFORM_MARKER in prompt:
            content = f"?!? unusable output {digest[:8]} ?!?"
        else:
            content = self._respond(request, prompt, digest)
        return ChatResponse(
            content=content,
            finish_reason=FinishReason.STOP,
            prompt_tokens=sum(len(m.content.split()) for m in request.messages),
            completion_tokens=len(content.split()),
            timestamp=0.0,
        )

    def _respond(self, request: ChatRequest, prompt: str, digest: str) -> str:
        tag = request.request_tag
        if tag == TAG_RECONSTRUCT:
            return self._rewrite_dialogue(prompt, digest)
        if tag == TAG_KGQA_STEP1:
            return self._facts_to_qa(prompt, digest)
        if tag == TAG_KGQA_STEP2:
            return self._qa_to_dialogue(prompt)
        if tag == TAG_PREFERENCE:
            return self._rewrite_dialogue(prompt, digest, seed_block="SEED")
        if tag == TAG_OPEN_QUESTION:
            case = extract_block(prompt, "CASE") or prompt
            return f"Doctor, I am worried about my situation (case {text_digest(case)[:8]}). What should I do?"
        if tag == TAG_PATIENT_TURN:
            return f"Since you ask: here is one more detail about my condition ({digest[:8]})."
        if tag == TAG_DOCTOR_REPLY:
            if any(m.role is MsgRole.ASSISTANT for m in request.messages):
                return f"Based on what you describe, my advice is as follows ({digest[:8]})."
            return f"Could you tell me more about your symptoms ({digest[:8]})?"
        if tag == TAG_JUDGE:
            return self._judge_verdict(prompt, digest)
        if tag == TAG_MCQ_ANSWER:
            return self._mcq_answer(prompt, digest)
        if tag == TAG_MCQA_REFINE:
            return self._facts_to_qa(prompt, digest, block="SOURCE")
        if tag == TAG_TRANSLATE:
            text = extract_block(prompt, "TEXT") or prompt
            return f"(zh) {text}"
        return f"mock response {digest[:16]}"

    def _rewrite_dialogue(self, prompt: str, digest: str, seed_block: str = "DIALOGUE") -> str:
        block = extract_block(prompt, seed_block)
        if block is None:
            return f"mock response {digest[:16]}"
        lines = []
        for line in block.splitlines():
            line = line.strip()
            if line.startswith("PATIENT:"):
                lines.append(line)
            elif line.startswith("DOCTOR:"):
                lines.append(f"{line} Let me explain this in more detail so it is clear.")
        lines.append("END")
        return "\n".join(lines)

    def _facts_to_qa(self, prompt: str, digest: str, block: str = "FACTS") -> str:
        body = extract_block(prompt, block)
        if body is None:
            return f"mock response {digest[:16]}"
        lines = [ln.strip() for ln in body.splitlines() if ln.strip()]
        subject = lines[0].split(":", 1)[1].strip() if ":" in lines[0] else lines[0]
        facts = "; ".join(lines[1:]) if len(lines) > 1 else lines[0]
        return (
            f"INSTRUCTION: What should I know about {subject}?\n"
            f"ANSWER: Regarding {subject}: {facts}.\n"
            "END"
        )

    def _qa_to_dialogue(self, prompt: str) -> str:
        qa = extract_block(prompt, "QA") or ""
        instruction, answer = "", ""
        for line in qa.splitlines():
            if line.startswith("INSTRUCTION:"):
                instruction = line[len("INSTRUCTION:"):].strip()
            elif line.startswith("ANSWER:"):
                answer = line[len("ANSWER:"):].strip()
        return (
            f"PATIENT: Hello doctor. {instruction}\n"
            f"DOCTOR: {answer} I hope this helps; feel free to ask more.\n"
            "END"
        )

    def _judge_verdict(self, prompt: str, digest: str) -> str:
        marker = _JUDGE_MARKER.search(prompt)
        if marker:
            scores = [int(g) for g in marker.groups()]
        else:
            scores = [int(digest[i * 2: i * 2 + 2], 16) % 5 + 1 for i in range(4)]
        names = ("proactivity", "accuracy", "helpfulness", "linguistic_quality")
        return "\n".join(f"{n}: {s}" for n, s in zip(names, scores))

    def _mcq_answer(self, prompt: str, digest: str) -> str:
        options = extract_block(prompt, "OPTIONS")
        letters = []
        if options:
            for line in options.splitlines():
                match = re.match(r"^([A-Z])\.", line.strip())
                if match:
                    letters.append(match.group(1))
        pick = letters[int(digest[:8], 16) % len(letters)] if letters else "A"
        return f"Answer: {pick}"


class HttpChatBackend:
    """Plain chat-completions HTTP client (messages array in, choice out)."""

    def __init__(self, config: BackendConfig, timeout: float = 60.0):
        self.config = config
        headers = {}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env, "")
            if not key:
                raise ValueError(
                    f"backend {config.backend_id!r}: environment variable "
                    f"{config.api_key_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.config.model or self.config.backend_id,
            "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            resp = self._client.post(self.config.endpoint, json=payload)
        except httpx.HTTPError as exc:
            raise TransportFailure(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportFailure(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        choice = body["choices"][0]
        usage = body.get("usage", {})
        return ChatResponse(
            content=choice["message"]["content"],
            finish_reason=FinishReason(choice.get("finish_reason", "stop")),
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            timestamp=time.time(),
        )


# --- rate limiting ---------------------------------------------------------

class _RateLimiter:
    """Sliding one-minute window; blocks callers until a slot frees up."""

    def __init__(self, rpm: int, clock: Callable[[], float], sleeper: Callable[[float], None]):
        self.rpm = rpm
        self.clock = clock
        self.sleeper = sleeper
        self._stamps: list[float] = []
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self._stamps = [t for t in self._stamps if now - t < 60.0]
                if len(self._stamps) < self.rpm:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self.sleeper(max(wait, 1e-3))


class _CacheStore:
    """Content-addressed directory of request/response record files."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> ChatResponse | None:
        path = self._path(digest)
        if not path.exists():
            return None
        with path.open("r", encoding="utf-8") as fh:
            rec = json.load(fh)
        resp = rec["response"]
        return ChatResponse(
            content=resp["content"],
            finish_reason=FinishReason(resp["finish_reason"]),
            prompt_tokens=resp["prompt_tokens"],
            completion_tokens=resp["completion_tokens"],
            cached=True,
            timestamp=resp["timestamp"],
        )

    def put(self, digest: str, request: ChatRequest, response: ChatResponse) -> None:
        rec = {
            "digest": digest,
            "request": {
                "backend_id": request.backend_id,
                "request_tag": request.request_tag,
                "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            },
            "response": {
                "content": response.content,
                "finish_reason": response.finish_reason.value,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
                "timestamp": response.timestamp,
            },
            "recorded_at": time.time(),
        }
        # One entry per digest: last write wins, written atomically.
        with self._lock:
            tmp = self._path(digest).with_suffix(".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                json.dump(rec, fh, ensure_ascii=False)
            tmp.replace(self._path(digest))


class _RegisteredBackend:
    def __init__(self, config: BackendConfig, backend, clock, sleeper):
        self.config = config
        self.backend = backend
        self.semaphore = threading.BoundedSemaphore(config.max_concurrency)
        self.limiter = _RateLimiter(config.requests_per_minute, clock, sleeper)
        self.cache = _CacheStore(config.cache_dir) if config.cache_mode is not CacheMode.OFF else None


class Gateway:
    """Shared, thread-safe entry point for all backend chat calls.

    ``clock`` and ``sleeper`` exist so rate-limit behavior can be tested
    against virtual time; production uses the wall clock.
    """

    BACKOFF_BASE = 0.5
    BACKOFF_CAP = 30.0

    def __init__(self, clock: Callable[[], float] = time.monotonic, sleeper: Callable[[float], None] = time.sleep):
        self._backends: dict[str, _RegisteredBackend] = {}
        self._lock = threading.Lock()
        self._clock = clock
        self._sleeper = sleeper

    def register_backend(self, config: BackendConfig, backend=None) -> str:
        """Register a backend; returns its id. An explicit ``backend``
        instance overrides the kind-based default (used to instrument
        tests)."""
        if backend is None:
            if config.kind is BackendKind.MOCK:
                backend = MockBackend()
            else:
                backend = HttpChatBackend(config)
        with self._lock:
            if config.backend_id in self._backends:
                raise DuplicateBackendError(f"backend id {config.backend_id!r} already registered")
            self._backends[config.backend_id] = _RegisteredBackend(config, backend, self._clock, self._sleeper)
        return config.backend_id

    def backend_config(self, backend_id: str) -> BackendConfig:
        return self._entry(backend_id).config

    def _entry(self, backend_id: str) -> _RegisteredBackend:
        with self._lock:
            try:
                return self._backends[backend_id]
            except KeyError:
                raise KeyError(f"backend {backend_id!r} is not registered") from None

    def chat(self, request: ChatRequest) -> ChatResponse:
        entry = self._entry(request.backend_id)
        digest = request_digest(request)
        mode = entry.config.cache_mode

        if entry.cache is not None and mode in (CacheMode.REPLAY, CacheMode.REPLAY_THEN_RECORD):
            hit = entry.cache.get(digest)
            if hit is not None:
                return hit
            if mode is CacheMode.REPLAY:
                raise ReplayMissError(request.request_tag, digest)

        response = self._call_with_retry(entry, request, digest)

        if entry.cache is not None and mode in (CacheMode.RECORD, CacheMode.REPLAY_THEN_RECORD):
            entry.cache.put(digest, request, response)
        return response

    def _call_with_retry(self, entry: _RegisteredBackend, request: ChatRequest, digest: str) -> ChatResponse:
        jitter = random.Random(digest)
        last_failure: Exception | None = None
        for attempt in range(entry.config.max_retries + 1):
            if attempt > 0:
                delay = min(self.BACKOFF_BASE * 2 ** (attempt - 1), self.BACKOFF_CAP)
                self._sleeper(delay * (0.5 + jitter.random()))
            entry.limiter.acquire()
            with entry.semaphore:
                try:
                    return entry.backend.complete(request)
                except TransportFailure as exc:
                    last_failure = exc
        raise TransportError(
            f"backend {entry.config.backend_id!r} failed after {entry.config.max_retries} retries: {last_failure}"
        )


def run_ordered(items: Sequence[T], fn: Callable[[T], U], max_workers: int = 8) -> list[U]:
    """Apply fn to every item with bounded parallelism; results keep input
    order regardless of completion order."""
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from medforge.errors import DuplicateBackendError, ReplayMissError, TransportError
from medforge.gateway import (
    BackendConfig,
    BackendKind,
    CacheMode,
    ChatRequest,
    ChatResponse,
    FinishReason,
    Gateway,
    Message,
    MockBackend,
    MsgRole,
    TransportFailure,
    extract_block,
    format_block,
    request_digest,
)


def mock_config(backend_id="m1", **kwargs) -> BackendConfig:
    return BackendConfig(backend_id=backend_id, kind=BackendKind.MOCK, **kwargs)


def simple_request(backend_id="m1", text="hello", tag="") -> ChatRequest:
    return ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.USER, text),),
        request_tag=tag,
    )


def test_register_then_chat():
    gateway = Gateway()
    gateway.register_backend(mock_config())
    response = gateway.chat(simple_request())
    assert response.content
    assert response.finish_reason is FinishReason.STOP


def test_duplicate_backend_id_rejected():
    gateway = Gateway()
    gateway.register_backend(mock_config())
    with pytest.raises(DuplicateBackendError):
        gateway.register_backend(mock_config())


def test_malformed_endpoint_rejected():
    with pytest.raises(ValueError):
        BackendConfig(backend_id="h", kind=BackendKind.HTTP_CHAT, endpoint="not-a-url")


def test_mock_is_deterministic():
    gateway = Gateway()
    gateway.register_backend(mock_config())
    request = simple_request(tag="kgqa_step1", text="Facts:\n" + format_block("FACTS", "disease: flu\nsymptom: cough"))
    first = gateway.chat(request)
    second = gateway.chat(request)
    assert first.content == second.content
    assert "flu" in first.content
    assert "INSTRUCTION:" in first.content


def test_digest_ignores_whitespace_cosmetics():
    r1 = simple_request(text="hello   world\n")
    r2 = simple_request(text="hello world")
    assert request_digest(r1) == request_digest(r2)
    r3 = simple_request(text="hello worlds")
    assert request_digest(r1) != request_digest(r3)


def test_block_roundtrip():
    text = "before\n" + format_block("FACTS", "line1\nline2") + "\nafter"
    assert extract_block(text, "FACTS") == "line1\nline2"
    assert extract_block(text, "OTHER") is None


def test_replay_then_record_caches(tmp_path):
    gateway = Gateway()
    gateway.register_backend(
        mock_config(cache_mode=CacheMode.REPLAY_THEN_RECORD, cache_dir=str(tmp_path))
    )
    request = simple_request(text="cache me")
    first = gateway.chat(request)
    second = gateway.chat(request)
    assert first.cached is False
    assert second.cached is True
    assert first.content == second.content


def test_strict_replay_miss_names_tag_and_digest(tmp_path):
    gateway = Gateway()
    gateway.register_backend(mock_config(cache_mode=CacheMode.REPLAY, cache_dir=str(tmp_path)))
    request = simple_request(text="never recorded", tag="kgqa_step1")
    with pytest.raises(ReplayMissError) as excinfo:
        gateway.chat(request)
    assert excinfo.value.request_tag == "kgqa_step1"
    assert excinfo.value.digest == request_digest(request)


def test_record_then_replay_round_trip(tmp_path):
    recorder = Gateway()
    recorder.register_backend(mock_config(cache_mode=CacheMode.RECORD, cache_dir=str(tmp_path)))
    request = simple_request(text="record this")
    recorded = recorder.chat(request)

    replayer = Gateway()
    replayer.register_backend(mock_config(cache_mode=CacheMode.REPLAY, cache_dir=str(tmp_path)))
    replayed = replayer.chat(request)
    assert replayed.content == recorded.content
    assert replayed.cached is True


class CountingBackend:
    """Mock wrapper that tracks in-flight and total calls."""

    def __init__(self, delay=0.0, fail_times=0):
        self.inner = MockBackend()
        self.delay = delay
        self.fail_times = fail_times
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            should_fail = self.calls <= self.fail_times
        try:
            if self.delay:
                time.sleep(self.delay)
            if should_fail:
                raise TransportFailure("synthetic failure")
            return self.inner.complete(request)
        finally:
            with self._lock:
                self.in_flight -= 1


def test_concurrency_never_exceeds_bound():
    backend = CountingBackend(delay=0.005)
    gateway = Gateway()
    gateway.register_backend(mock_config(max_concurrency=4, requests_per_minute=100_000), backend=backend)
    requests = [simple_request(text=f"req {i}") for i in range(100)]
    with ThreadPoolExecutor(max_workers=32) as pool:
        results = list(pool.map(gateway.chat, requests))
    assert len(results) == 100
    assert backend.max_in_flight <= 4


def test_retry_succeeds_and_keeps_one_cache_entry(tmp_path):
    backend = CountingBackend(fail_times=2)
    gateway = Gateway(sleeper=lambda _t: None)
    gateway.register_backend(
        mock_config(max_retries=3, cache_mode=CacheMode.RECORD, cache_dir=str(tmp_path)),
        backend=backend,
    )
    response = gateway.chat(simple_request(text="flaky"))
    assert response.content
    assert backend.calls == 3
    entries = list(tmp_path.glob("*.json"))
    assert len(entries) == 1


def test_retries_exhausted_raises_transport_error():
    backend = CountingBackend(fail_times=10)
    gateway = Gateway(sleeper=lambda _t: None)
    gateway.register_backend(mock_config(max_retries=2), backend=backend)
    with pytest.raises(TransportError):
        gateway.chat(simple_request(text="always fails"))
    assert backend.calls == 3  # initial + 2 retries


class VirtualClock:
    def __init__(self):
        self.now = 0.0
        self.slept = 0.0

    def clock(self):
        return self.now

    def sleep(self, seconds):
        self.now += seconds
        self.slept += seconds


def test_rate_limit_120_requests_at_rpm60_takes_a_minute_virtual():
    clock = VirtualClock()
    gateway = Gateway(clock=clock.clock, sleeper=clock.sleep)
    gateway.register_backend(mock_config(requests_per_minute=60))
    for i in range(120):
        gateway.chat(simple_request(text=f"r{i}"))
    # the second 60 requests cannot start before the first window expires
    assert clock.now >= 59.0


def test_rate_limit_burst_within_budget_is_not_delayed():
    clock = VirtualClock()
    gateway = Gateway(clock=clock.clock, sleeper=clock.sleep)
    gateway.register_backend(mock_config(requests_per_minute=60))
    for i in range(60):
        gateway.chat(simple_request(text=f"r{i}"))
    assert clock.slept == 0.0


def test_malform_marker_produces_garbage():
    gateway = Gateway()
    gateway.register_backend(mock_config())
    response = gateway.chat(simple_request(text="[[MALFORM]] anything", tag="reconstruct"))
    assert "PATIENT" not in response.content


def test_judge_marker_controls_scores():
    gateway = Gateway()
    gateway.register_backend(mock_config())
    response = gateway.chat(simple_request(text="[[JUDGE:5,4,3,2]] transcript", tag="judge"))
    assert response.content.splitlines() == [
        "proactivity: 5", "accuracy: 4", "helpfulness: 3", "linguistic_quality: 2",
    ]


def test_chat_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest(backend_id="m", messages=())
    with pytest.raises(ValueError):
        ChatRequest(backend_id="m", messages=(Message(MsgRole.ASSISTANT, "hi"),))
    with pytest.raises(ValueError):
        ChatResponse(content="", finish_reason=FinishReason.STOP)

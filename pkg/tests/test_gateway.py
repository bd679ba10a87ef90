"""Backends: scripted matching rules, HTTP retry policy, response parsing."""

import json
import logging

import httpx
import pytest

from talk2care.errors import ConfigurationError, ValidationError
from talk2care.gateway import (
    AuthRejected,
    CompletionRequest,
    GatewayError,
    GatewayTimeout,
    HttpBackend,
    MalformedResponse,
    RateLimited,
    ScriptedBackend,
    ScriptedExchange,
    ScriptedMiss,
    backend_from_env,
    last_patient_utterance,
)
from talk2care.prompts import Message


def request_with(*contents: str) -> CompletionRequest:
    return CompletionRequest(messages=tuple(Message("system", c) for c in contents))


# -- request validation ---------------------------------------------------------

def test_completion_request_validation():
    with pytest.raises(ValidationError):
        CompletionRequest(messages=())
    with pytest.raises(ValidationError):
        request = CompletionRequest(messages=(Message("system", "x"),), temperature=2.5)
    with pytest.raises(ValidationError):
        CompletionRequest(messages=(Message("system", "x"),), max_output_tokens=0)
    ok = CompletionRequest(messages=[Message("system", "x")])
    assert isinstance(ok.messages, tuple)


# -- utterance extraction ---------------------------------------------------------

def test_last_patient_utterance_takes_the_most_recent():
    req = request_with(
        "==== 4. CONVERSATION HISTORY ====\n"
        "Assistant: How are you?\n"
        "Patient: Tired.\n"
        "Assistant: Sorry to hear.\n"
        "Patient: But the pain is gone."
    )
    assert last_patient_utterance(req) == "But the pain is gone."


def test_last_patient_utterance_spans_multiple_lines():
    req = request_with(
        "Patient: First line\nsecond line\n==== 5. X ====\nmore"
    )
    assert last_patient_utterance(req) == "First line\nsecond line"


def test_last_patient_utterance_none_before_any_patient_turn():
    req = request_with("==== 4. CONVERSATION HISTORY ====\n(no conversation yet)")
    assert last_patient_utterance(req) is None


# -- scripted backend ---------------------------------------------------------

def test_scripted_exact_text_match():
    backend = ScriptedBackend([ScriptedExchange("Hello there.", "Hi!")])
    assert backend.complete(request_with("Patient: Hello there.")) == "Hi!"


def test_scripted_empty_string_matches_opening_call():
    backend = ScriptedBackend([ScriptedExchange("", "Welcome!")])
    assert backend.complete(request_with("(no conversation yet)")) == "Welcome!"


def test_scripted_ordinal_fallback():
    backend = ScriptedBackend([ScriptedExchange(0, "first"), ScriptedExchange(1, "second")])
    assert backend.complete(request_with("Patient: anything")) == "first"
    assert backend.complete(request_with("Patient: anything")) == "second"


def test_scripted_exact_match_beats_ordinal():
    backend = ScriptedBackend([
        ScriptedExchange(0, "by ordinal"),
        ScriptedExchange("ping", "by text"),
    ])
    assert backend.complete(request_with("Patient: ping")) == "by text"


def test_scripted_miss_is_loud_and_carries_context():
    backend = ScriptedBackend([ScriptedExchange("expected", "reply")])
    with pytest.raises(ScriptedMiss) as exc:
        backend.complete(request_with("Patient: surprise"))
    assert "call #0" in str(exc.value)
    assert "surprise" in str(exc.value)


def test_scripted_duplicate_keys_rejected():
    with pytest.raises(ConfigurationError):
        ScriptedBackend([ScriptedExchange("a", "x"), ScriptedExchange("a", "y")])
    with pytest.raises(ConfigurationError):
        ScriptedBackend([ScriptedExchange(1, "x"), ScriptedExchange(1, "y")])


def test_scripted_bool_match_key_rejected():
    with pytest.raises(ConfigurationError):
        ScriptedBackend([ScriptedExchange(True, "x")])


def test_scripted_from_file_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        ScriptedBackend.from_file(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", "utf-8")
    with pytest.raises(ConfigurationError):
        ScriptedBackend.from_file(bad)
    not_list = tmp_path / "notlist.json"
    not_list.write_text('{"match_key": "a"}', "utf-8")
    with pytest.raises(ConfigurationError):
        ScriptedBackend.from_file(not_list)


# -- http backend ---------------------------------------------------------

def ok_body(text="fine"):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def make_http(handler, **kwargs):
    sleeps: list[float] = []
    backend = HttpBackend(
        base_url="http://llm.test/v1", model="test-model", api_key="k",
        transport=httpx.MockTransport(handler), sleep=sleeps.append, **kwargs
    )
    return backend, sleeps


def test_http_success_round_trip():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["payload"] = json.loads(request.content)
        return httpx.Response(200, json=ok_body("the reply"))

    backend, _ = make_http(handler)
    assert backend.complete(request_with("hello")) == "the reply"
    assert seen["url"].endswith("/chat/completions")
    assert seen["auth"] == "Bearer k"
    assert seen["payload"]["model"] == "test-model"
    assert seen["payload"]["messages"][0] == {"role": "system", "content": "hello"}


def test_http_retries_5xx_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json=ok_body())

    backend, sleeps = make_http(handler, backoff_base=0.5)
    assert backend.complete(request_with("x")) == "fine"
    assert len(calls) == 3
    assert sleeps == [0.5, 1.0]  # exponential: base * 2^(attempt-2)


def test_http_rate_limit_exhausts_into_rate_limited():
    def handler(request):
        return httpx.Response(429)

    backend, sleeps = make_http(handler, max_attempts=3)
    with pytest.raises(RateLimited):
        backend.complete(request_with("x"))
    assert len(sleeps) == 2


def test_http_auth_rejection_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    backend, _ = make_http(handler)
    with pytest.raises(AuthRejected):
        backend.complete(request_with("x"))
    assert len(calls) == 1


def test_http_unexpected_4xx_fails_without_retry():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(418)

    backend, _ = make_http(handler)
    with pytest.raises(GatewayError):
        backend.complete(request_with("x"))
    assert len(calls) == 1


def test_http_timeouts_retry_then_surface():
    def handler(request):
        raise httpx.ConnectTimeout("boom")

    backend, sleeps = make_http(handler, max_attempts=3)
    with pytest.raises(GatewayTimeout):
        backend.complete(request_with("x"))
    assert len(sleeps) == 2


@pytest.mark.parametrize("body", [
    "not json at all",
    json.dumps({"choices": []}),
    json.dumps({"choices": [{"message": {}}]}),
    json.dumps({"choices": [{"message": {"content": 42}}]}),
])
def test_http_malformed_bodies(body):
    def handler(request):
        return httpx.Response(200, content=body, headers={"content-type": "application/json"})

    backend, _ = make_http(handler)
    with pytest.raises(MalformedResponse):
        backend.complete(request_with("x"))


def test_http_requires_base_url_and_model(monkeypatch):
    monkeypatch.delenv("LLM_BASE_URL", raising=False)
    monkeypatch.delenv("LLM_MODEL", raising=False)
    with pytest.raises(ConfigurationError):
        HttpBackend()
    with pytest.raises(ConfigurationError):
        HttpBackend(base_url="http://x")


def test_http_reads_configuration_from_env(monkeypatch):
    monkeypatch.setenv("LLM_BASE_URL", "http://llm.test/v1")
    monkeypatch.setenv("LLM_MODEL", "env-model")
    monkeypatch.setenv("LLM_API_KEY", "env-key")
    backend = HttpBackend(transport=httpx.MockTransport(
        lambda request: httpx.Response(200, json=ok_body())
    ))
    assert backend.model == "env-model"
    assert backend.complete(request_with("x")) == "fine"


def test_http_never_logs_content_above_debug(caplog):
    secret = "patient mentioned a very private matter"

    def handler(request):
        return httpx.Response(200, json=ok_body("reply about " + secret))

    backend, _ = make_http(handler)
    with caplog.at_level(logging.INFO):
        backend.complete(request_with(secret))
    assert secret not in caplog.text


# -- env selection ---------------------------------------------------------

def test_backend_from_env_scripted(monkeypatch, tmp_path):
    script = tmp_path / "s.json"
    script.write_text(json.dumps([{"match_key": "", "response": "hi"}]), "utf-8")
    monkeypatch.setenv("LLM_BACKEND", "scripted")
    monkeypatch.setenv("LLM_SCRIPT", str(script))
    backend = backend_from_env()
    assert isinstance(backend, ScriptedBackend)


def test_backend_from_env_scripted_requires_script(monkeypatch):
    monkeypatch.setenv("LLM_BACKEND", "scripted")
    monkeypatch.delenv("LLM_SCRIPT", raising=False)
    with pytest.raises(ConfigurationError):
        backend_from_env()


def test_backend_from_env_unknown_kind(monkeypatch):
    monkeypatch.setenv("LLM_BACKEND", "quantum")
    with pytest.raises(ConfigurationError):
        backend_from_env()

"""LLM access.

Two interchangeable backends sit behind the same one-method interface:

* ScriptedBackend replays canned exchanges and is fully deterministic, so
  whole conversations can be reproduced byte for byte in tests and demos.
* HttpBackend speaks the common chat-completions HTTP protocol and is
  configured entirely through environment variables.

Request and response text is only ever logged at DEBUG.
"""

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx

from .errors import ConfigurationError, Talk2CareError, ValidationError
from .prompts import Message

log = logging.getLogger(__name__)

# Question generation keeps some variety; analysis call sites pin to 0.
DEFAULT_QUESTION_TEMPERATURE = 0.7
DEFAULT_ANALYSIS_TEMPERATURE = 0.0


class GatewayError(Talk2CareError):
    """Base for all backend failures."""


class GatewayTimeout(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class AuthRejected(GatewayError):
    """Credentials refused. Never retried."""


class MalformedResponse(GatewayError):
    """The backend answered, but not in the shape we can use."""


class ScriptedMiss(GatewayError):
    """No scripted exchange matched. Deliberately loud, never a fallback."""


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_QUESTION_TEMPERATURE
    max_output_tokens: int = 512
    backend_id: str = "default"

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("messages", "must be non-empty")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValidationError("temperature", f"must be within [0, 2], got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValidationError("max_output_tokens", "must be positive")
        object.__setattr__(self, "messages", tuple(self.messages))


class CompletionBackend(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


def last_patient_utterance(request: CompletionRequest) -> str | None:
    """Pull the most recent patient line out of the rendered prompt.

    History blocks label turns as 'Patient: ...' / 'Assistant: ...'. A
    patient utterance may span lines, so capture runs until the next label
    or section delimiter.
    """
    text = "\n".join(m.content for m in request.messages)
    lines = text.split("\n")
    captured: list[list[str]] = []
    current: list[str] | None = None
    for line in lines:
        if line.startswith("Patient: "):
            current = [line[len("Patient: "):]]
            captured.append(current)
        elif line.startswith("Assistant: ") or line.startswith("===="):
            current = None
        elif current is not None:
            current.append(line)
    if not captured:
        return None
    return "\n".join(captured[-1]).rstrip("\n")


@dataclass(frozen=True)
class ScriptedExchange:
    """One canned reply.

    match_key is either the exact text of the last patient utterance (the
    empty string matches calls where no patient has spoken yet) or an int,
    the 0-based ordinal of the call on this backend instance. Exact text
    matches win over ordinals.
    """

    match_key: str | int
    response: str


class ScriptedBackend:
    def __init__(self, exchanges: list[ScriptedExchange]):
        self._by_text: dict[str, str] = {}
        self._by_ordinal: dict[int, str] = {}
        for ex in exchanges:
            if isinstance(ex.match_key, bool) or not isinstance(ex.match_key, (str, int)):
                raise ConfigurationError(f"match_key must be str or int, got {ex.match_key!r}")
            table = self._by_text if isinstance(ex.match_key, str) else self._by_ordinal
            if ex.match_key in table:
                raise ConfigurationError(f"duplicate scripted match_key: {ex.match_key!r}")
            table[ex.match_key] = ex.response
        self._calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        try:
            raw = json.loads(Path(path).read_text("utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"script file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"script file is not valid JSON: {path}") from exc
        return cls.from_entries(raw)

    @classmethod
    def from_entries(cls, entries: list[dict]) -> "ScriptedBackend":
        if not isinstance(entries, list):
            raise ConfigurationError("script must be a JSON list of exchanges")
        return cls([ScriptedExchange(e["match_key"], e["response"]) for e in entries])

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            ordinal = self._calls
            self._calls += 1
        utterance = last_patient_utterance(request)
        key = utterance if utterance is not None else ""
        if key in self._by_text:
            return self._by_text[key]
        if ordinal in self._by_ordinal:
            return self._by_ordinal[ordinal]
        raise ScriptedMiss(
            f"no scripted exchange for call #{ordinal} "
            f"(last patient utterance: {key!r})"
        )


_RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class HttpBackend:
    """Chat-completions client with bounded retries.

    Reads LLM_BASE_URL, LLM_MODEL and LLM_API_KEY from the environment when
    not passed explicitly. Transient failures (timeouts, 429, 5xx) are
    retried up to max_attempts with exponential backoff; auth rejections
    are not.
    """

    def __init__(self, base_url: str | None = None, model: str | None = None,
                 api_key: str | None = None, timeout: float = 30.0,
                 max_attempts: int = 3, backoff_base: float = 0.5,
                 min_interval: float = 0.0, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.base_url = base_url or os.environ.get("LLM_BASE_URL")
        self.model = model or os.environ.get("LLM_MODEL")
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        if not self.base_url:
            raise ConfigurationError("LLM_BASE_URL is not set")
        if not self.model:
            raise ConfigurationError("LLM_MODEL is not set")
        if max_attempts < 1:
            raise ConfigurationError("max_attempts must be at least 1")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.min_interval = min_interval
        self._sleep = sleep
        self._last_call = 0.0
        self._throttle_lock = threading.Lock()
        self._client = httpx.Client(
            base_url=self.base_url, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def _throttle(self) -> None:
        if self.min_interval <= 0:
            return
        with self._throttle_lock:
            wait = self.min_interval - (time.monotonic() - self._last_call)
            if wait > 0:
                self._sleep(wait)
            self._last_call = time.monotonic()

    def complete(self, request: CompletionRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        log.debug("completion request: %s", payload)

        last_error: GatewayError | None = None
        for attempt in range(1, self.max_attempts + 1):
            if attempt > 1:
                self._sleep(self.backoff_base * 2 ** (attempt - 2))
                log.warning("retrying completion (attempt %d/%d)", attempt, self.max_attempts)
            self._throttle()
            try:
                response = self._client.post("/chat/completions", json=payload, headers=headers)
            except httpx.TimeoutException:
                last_error = GatewayTimeout(f"request timed out (attempt {attempt})")
                continue
            except httpx.HTTPError as exc:
                last_error = GatewayError(f"transport failure: {type(exc).__name__}")
                continue

            if response.status_code in (401, 403):
                raise AuthRejected(f"backend rejected credentials ({response.status_code})")
            if response.status_code in _RETRYABLE_STATUSES:
                kind = RateLimited if response.status_code == 429 else GatewayError
                last_error = kind(f"backend returned {response.status_code}")
                continue
            if response.status_code != 200:
                raise GatewayError(f"backend returned {response.status_code}")
            return self._extract_text(response)

        assert last_error is not None
        raise last_error

    @staticmethod
    def _extract_text(response: httpx.Response) -> str:
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected completion shape: {exc}") from exc
        if not isinstance(text, str):
            raise MalformedResponse("completion content is not text")
        log.debug("completion response: %s", text)
        return text


def backend_from_env() -> CompletionBackend:
    """Build the backend selected by LLM_BACKEND (scripted | http)."""
    kind = os.environ.get("LLM_BACKEND", "http")
    if kind == "http":
        return HttpBackend()
    if kind == "scripted":
        script = os.environ.get("LLM_SCRIPT")
        if not script:
            raise ConfigurationError("LLM_BACKEND=scripted requires LLM_SCRIPT")
        return ScriptedBackend.from_file(script)
    raise ConfigurationError(f"unknown LLM_BACKEND: {kind!r}")

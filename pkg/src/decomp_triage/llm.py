"""Provider-agnostic LLM classification client.

One HTTP shape (chat-completions style JSON over POST with bearer auth)
covers every hosted provider here; per-provider differences live entirely
in `ProviderProfile` data. API keys are resolved from the environment at
request time and are never persisted anywhere.

Verdict parsing is tiered: strict JSON first, then extraction of an object
from surrounding fences or chatter, then coercion of Python-style booleans.
Each verdict records the most lenient tier it needed, so downstream
analysis can see how well a model followed the output format.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

from .errors import TriageError
from .prompt import PromptPayload

ResponseSink = Callable[[str, str], None]


class LlmError(TriageError):
    pass


class AuthError(LlmError):
    """Missing or rejected credentials. Never retried."""


class RateLimitedError(LlmError):
    """Provider-side throttling. Retryable."""


class TransportError(LlmError):
    """Network failure or provider-side fault. Retryable."""


class ContextRejected(LlmError):
    """Provider refused the request because the prompt was too large."""


class MalformedVerdict(LlmError):
    """Response text contained no single coherent verdict object."""

    def __init__(self, raw: str, reason: str):
        self.raw = raw
        preview = raw[:120].replace("\n", "\\n")
        super().__init__(f"{reason}: {preview!r}")


RETRYABLE_ERRORS = (RateLimitedError, TransportError)


class ParsePath(enum.IntEnum):
    """Most lenient parsing mechanism a verdict needed, ascending."""

    STRICT_JSON = 1
    FENCE_STRIPPED = 2
    BOOLEAN_COERCED = 3


@dataclass(frozen=True)
class Verdict:
    sha256: str
    is_malware: bool
    raw_response: str
    provider_name: str
    model_id: str
    latency_ms: int
    parse_path: ParsePath


@dataclass(frozen=True)
class ClassifyFailure:
    """A sample that produced no verdict, with the error that stopped it."""

    sha256: str
    error_kind: str
    message: str


@dataclass(frozen=True)
class ProviderProfile:
    provider_name: str
    endpoint_url: str
    model_id: str
    api_key_env_var: str
    requests_per_minute: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


# --- verdict parsing ---------------------------------------------------------

_PY_TRUE = re.compile(r"\bTrue\b")
_PY_FALSE = re.compile(r"\bFalse\b")


def _find_objects(text: str) -> list[str]:
    """Balanced top-level {...} substrings, skipping braces inside strings."""
    objects = []
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    objects.append(text[start : i + 1])
    return objects


def _try_load(candidate: str) -> tuple[dict | None, bool]:
    """Parse a candidate object; returns (dict, needed_boolean_coercion)."""
    try:
        obj = json.loads(candidate)
        if isinstance(obj, dict):
            return obj, False
    except (ValueError, RecursionError):
        pass
    coerced = _PY_FALSE.sub("false", _PY_TRUE.sub("true", candidate))
    if coerced != candidate:
        try:
            obj = json.loads(coerced)
            if isinstance(obj, dict):
                return obj, True
        except (ValueError, RecursionError):
            pass
    return None, False


def _verdict_value(obj: dict) -> tuple[bool, bool] | None:
    """Extract (is_malware, needed_coercion) from a parsed object.

    The key must be exactly "Malware"; a case variant is a format
    violation, not a verdict.
    """
    if "Malware" not in obj:
        return None
    value = obj["Malware"]
    if isinstance(value, bool):
        return value, False
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered == "true":
            return True, True
        if lowered == "false":
            return False, True
    return None


def parse_verdict(raw: str) -> tuple[bool, ParsePath]:
    """Turn raw model output into a boolean verdict, or raise MalformedVerdict.

    Total over arbitrary input: any string either yields a verdict or
    raises MalformedVerdict, never an unhandled parse exception.
    """
    if not isinstance(raw, str):
        raise MalformedVerdict(repr(raw), "response is not text")

    stripped = raw.strip()
    direct: dict | None = None
    try:
        parsed = json.loads(stripped)
        if isinstance(parsed, dict):
            direct = parsed
    except (ValueError, RecursionError):
        direct = None

    if direct is not None:
        extracted = _verdict_value(direct)
        if extracted is None:
            raise MalformedVerdict(raw, "JSON object lacks a boolean 'Malware' key")
        value, coerced_value = extracted
        path = ParsePath.BOOLEAN_COERCED if coerced_value else ParsePath.STRICT_JSON
        return value, path

    findings: list[tuple[bool, bool]] = []
    for candidate in _find_objects(raw):
        obj, coerced_parse = _try_load(candidate)
        if obj is None:
            continue
        extracted = _verdict_value(obj)
        if extracted is None:
            continue
        value, coerced_value = extracted
        findings.append((value, coerced_parse or coerced_value))

    if not findings:
        raise MalformedVerdict(raw, "no verdict object found")
    values = {value for value, _ in findings}
    if len(values) > 1:
        raise MalformedVerdict(raw, "conflicting verdict objects")
    value = values.pop()
    needed_coercion = any(coerced for v, coerced in findings if v == value)
    path = ParsePath.BOOLEAN_COERCED if needed_coercion else ParsePath.FENCE_STRIPPED
    return value, path


# --- rate limiting -----------------------------------------------------------


class RateLimiter:
    """Token bucket with capacity one: strict request pacing.

    Shared across worker threads; `acquire` blocks until the caller may
    send. Clock and sleep are injectable so pacing is testable without
    real waiting.
    """

    def __init__(
        self,
        per_minute: float,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if per_minute <= 0:
            raise ValueError("per_minute must be positive")
        self._interval = 60.0 / per_minute
        self._clock = clock
        self._sleep = sleep
        self._next_free: float | None = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                if self._next_free is None or now >= self._next_free:
                    base = now if self._next_free is None else max(now, self._next_free)
                    self._next_free = base + self._interval
                    return
                wait = self._next_free - now
            self._sleep(wait)


# --- transports --------------------------------------------------------------


class Transport(Protocol):
    def send(self, profile: ProviderProfile, payload: PromptPayload) -> str:
        """Return the raw response text, or raise an LlmError subclass."""


_CONTEXT_HINTS = ("context", "token", "length", "too large", "too long")


class HttpTransport:
    """Chat-completions wire format over httpx."""

    def send(self, profile: ProviderProfile, payload: PromptPayload) -> str:
        import httpx

        api_key = os.environ.get(profile.api_key_env_var)
        if not api_key:
            raise AuthError(
                f"environment variable {profile.api_key_env_var} is not set"
            )
        body = {
            "model": profile.model_id,
            "messages": [{"role": "user", "content": payload.text}],
            "temperature": profile.temperature,
        }
        try:
            response = httpx.post(
                profile.endpoint_url,
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=profile.timeout_s,
            )
        except httpx.TimeoutException as exc:
            raise TransportError(f"request timed out: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc

        if response.status_code in (401, 403):
            raise AuthError(f"provider rejected credentials ({response.status_code})")
        if response.status_code == 429:
            raise RateLimitedError("provider throttled the request (429)")
        if response.status_code in (400, 413):
            text = response.text.lower()
            if any(hint in text for hint in _CONTEXT_HINTS):
                raise ContextRejected(
                    f"provider rejected prompt size ({response.status_code})"
                )
            raise TransportError(
                f"provider rejected request ({response.status_code}): {response.text[:200]}"
            )
        if response.status_code >= 400:
            raise TransportError(
                f"provider error {response.status_code}: {response.text[:200]}"
            )

        try:
            envelope = response.json()
            content = envelope["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unrecognized response envelope: {exc}") from exc
        if not isinstance(content, str):
            raise TransportError("response content is not text")
        return content


class MockTransport:
    """Deterministic offline provider.

    With no verdict table, the verdict and response style are a pure
    function of (template digest, sample sha256), so repeated runs over
    the same corpus reproduce byte-identical responses. A verdict table
    pins chosen samples to chosen answers; queued errors are raised once
    each, in order, before any response is produced.
    """

    def __init__(self, verdict_table: dict[str, bool] | None = None):
        self.verdict_table = dict(verdict_table or {})
        self.calls = 0
        self._errors: list[LlmError] = []
        self._lock = threading.Lock()

    def queue_error(self, *errors: LlmError) -> None:
        with self._lock:
            self._errors.extend(errors)

    @staticmethod
    def decide(template_sha256: str, sha256: str) -> tuple[bool, int]:
        """(verdict, response style) for a sample; style cycles 0..2."""
        digest = hashlib.sha256(f"{template_sha256}:{sha256}".encode()).hexdigest()
        return int(digest[0], 16) % 2 == 0, int(digest[1], 16) % 3

    @staticmethod
    def render(verdict: bool, style: int) -> str:
        """Style 0: strict JSON. 1: Python-literal booleans. 2: fenced JSON.

        One style per parse tier, so a corpus of mock responses exercises
        the whole parsing ladder.
        """
        if style == 0:
            return json.dumps({"Malware": verdict})
        if style == 1:
            word = "True" if verdict else "False"
            return f'{{"Malware": {word}}}'
        return f'```json\n{json.dumps({"Malware": verdict})}\n```'

    def send(self, profile: ProviderProfile, payload: PromptPayload) -> str:
        with self._lock:
            self.calls += 1
            if self._errors:
                raise self._errors.pop(0)
        if payload.sha256 in self.verdict_table:
            return self.render(self.verdict_table[payload.sha256], style=0)
        verdict, style = self.decide(payload.template_hash, payload.sha256)
        return self.render(verdict, style)


# --- client ------------------------------------------------------------------


class LlmClient:
    """Retry, pacing, and parsing around a transport.

    Retries cover rate limiting and transport faults with exponential
    backoff (base * 2^n, no jitter, so tests are deterministic);
    `max_retries` counts retries after the first attempt. Auth failures,
    context rejections, and malformed verdicts are never retried: none of
    them get better by asking again.
    """

    def __init__(
        self,
        profile: ProviderProfile,
        transport: Transport,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base_s: float = 0.5,
    ):
        self.profile = profile
        self.transport = transport
        self.backoff_base_s = backoff_base_s
        self._clock = clock
        self._sleep = sleep
        self.limiter = RateLimiter(
            profile.requests_per_minute, clock=clock, sleep=sleep
        )

    def classify(
        self, payload: PromptPayload, *, response_sink: ResponseSink | None = None
    ) -> Verdict:
        last_error: LlmError | None = None
        for attempt in range(self.profile.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_base_s * 2 ** (attempt - 1))
            self.limiter.acquire()
            started = self._clock()
            try:
                raw = self.transport.send(self.profile, payload)
            except RETRYABLE_ERRORS as exc:
                last_error = exc
                continue
            latency_ms = int((self._clock() - started) * 1000)
            # Persist the raw response before parsing: a malformed verdict
            # must still leave an auditable response on disk.
            if response_sink is not None:
                response_sink(payload.sha256, raw)
            is_malware, parse_path = parse_verdict(raw)
            return Verdict(
                sha256=payload.sha256,
                is_malware=is_malware,
                raw_response=raw,
                provider_name=self.profile.provider_name,
                model_id=self.profile.model_id,
                latency_ms=latency_ms,
                parse_path=parse_path,
            )
        assert last_error is not None
        raise last_error

    def classify_batch(
        self,
        payloads: Sequence[PromptPayload],
        *,
        max_in_flight: int = 1,
        response_sink: ResponseSink | None = None,
    ) -> list[Verdict | ClassifyFailure]:
        """Classify many payloads; one result per input, in input order.

        Per-sample failures become ClassifyFailure entries rather than
        aborting the batch.
        """

        def one(payload: PromptPayload) -> Verdict | ClassifyFailure:
            try:
                return self.classify(payload, response_sink=response_sink)
            except LlmError as exc:
                return ClassifyFailure(
                    sha256=payload.sha256,
                    error_kind=type(exc).__name__,
                    message=str(exc),
                )

        if max_in_flight <= 1:
            return [one(p) for p in payloads]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(one, payloads))

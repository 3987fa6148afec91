"""Chat-completion backends, retry wrapping and bounded parallel execution."""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, TypeVar, Union

import httpx

from .axtree import Estimator, TokenBudget, estimate_tokens

log = logging.getLogger(__name__)

T = TypeVar("T")

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    attachments: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        object.__setattr__(self, "attachments", tuple(self.attachments))


@dataclass(frozen=True)
class GenParams:
    max_new_tokens: int = 8192
    temperature: float = 0.0
    seed: int | None = None
    # Passed through verbatim to live endpoints (e.g. provider thinking knobs).
    extra: dict[str, Any] = field(default_factory=dict)


class BackendError(Exception):
    retryable = False


class TransportError(BackendError):
    retryable = True


class ProtocolError(BackendError):
    retryable = True


class RequestRejectedError(BackendError):
    """The request itself is invalid; resending it cannot help."""


class PromptTooLongError(RequestRejectedError):
    pass


class ScriptError(BackendError):
    pass


class RetriesExhaustedError(BackendError):
    def __init__(self, attempts: int, last_error: BaseException):
        super().__init__(f"gave up after attempts={attempts}: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


def is_retryable(exc: BaseException) -> bool:
    return isinstance(exc, BackendError) and exc.retryable


class ChatBackend:
    """Base class: validates the request, then defers to ``_complete``."""

    def __init__(self, budget: TokenBudget = TokenBudget(), estimator: Estimator = estimate_tokens):
        self.budget = budget
        self.estimator = estimator

    def check_request(self, messages: Sequence[ChatMessage], params: GenParams) -> None:
        if not messages:
            raise RequestRejectedError("no messages")
        if messages[-1].role != "user":
            raise RequestRejectedError("last message must have role 'user'")
        if params.max_new_tokens > self.budget.max_new:
            raise RequestRejectedError(
                f"max_new_tokens {params.max_new_tokens} exceeds budget {self.budget.max_new}"
            )
        used = sum(self.estimator(m.text) for m in messages)
        if used > self.budget.max_prompt:
            raise PromptTooLongError(
                f"prompt estimate {used} tokens exceeds max_prompt {self.budget.max_prompt}"
            )

    def chat(self, messages: Sequence[ChatMessage], params: GenParams = GenParams()) -> str:
        self.check_request(messages, params)
        return self._complete(list(messages), params)

    def _complete(self, messages: list[ChatMessage], params: GenParams) -> str:
        raise NotImplementedError

    @property
    def live(self) -> bool:
        return False


Reply = Union[str, Callable[[list[ChatMessage]], str]]


@dataclass(frozen=True)
class ScriptEntry:
    """One canned answer.

    Matches when every ``contains`` substring occurs in the last user
    message and, if set, ``ordinal`` equals the 1-based request number seen
    by this backend. ``ordinal`` entries are only reproducible with one
    worker. ``error`` raises instead of replying ("transport", "protocol" or
    "rejected").
    """

    reply: Reply = ""
    contains: tuple[str, ...] = ()
    ordinal: int | None = None
    error: str | None = None

    def matches(self, text: str, ordinal: int) -> bool:
        if self.ordinal is not None and self.ordinal != ordinal:
            return False
        return all(s in text for s in self.contains)


_SCRIPT_ERRORS = {
    "transport": TransportError,
    "protocol": ProtocolError,
    "rejected": RequestRejectedError,
}


class ScriptedBackend(ChatBackend):
    """Deterministic stand-in for a chat endpoint.

    Entries are tried in order and the first match answers; ``default``
    answers anything left over. Attachments are ignored.
    """

    def __init__(
        self,
        entries: Sequence[ScriptEntry] = (),
        default: Reply | None = None,
        budget: TokenBudget = TokenBudget(),
        estimator: Estimator = estimate_tokens,
    ):
        super().__init__(budget, estimator)
        self.entries = list(entries)
        self.default = default
        self._lock = threading.Lock()
        self.calls = 0
        self.requests: list[list[ChatMessage]] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike, budget: TokenBudget = TokenBudget()) -> ScriptedBackend:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = []
        for i, e in enumerate(doc.get("entries", [])):
            contains = e.get("contains", ())
            if isinstance(contains, str):
                contains = (contains,)
            if e.get("error") is not None and e["error"] not in _SCRIPT_ERRORS:
                raise ScriptError(f"entry {i}: unknown error kind {e['error']!r}")
            entries.append(ScriptEntry(
                reply=e.get("reply", ""), contains=tuple(contains),
                ordinal=e.get("ordinal"), error=e.get("error"),
            ))
        return cls(entries, default=doc.get("default"), budget=budget)

    def _complete(self, messages: list[ChatMessage], params: GenParams) -> str:
        with self._lock:
            self.calls += 1
            ordinal = self.calls
            self.requests.append(messages)
        text = messages[-1].text
        for entry in self.entries:
            if entry.matches(text, ordinal):
                if entry.error:
                    raise _SCRIPT_ERRORS[entry.error](f"scripted {entry.error} failure")
                return entry.reply(messages) if callable(entry.reply) else entry.reply
        if self.default is None:
            raise ScriptError(f"no script entry matches request {ordinal}: {text[:120]!r}")
        return self.default(messages) if callable(self.default) else self.default


_RETRY_STATUS = {408, 409, 425, 429}


class OpenAICompatibleBackend(ChatBackend):
    """POSTs to an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        budget: TokenBudget = TokenBudget(),
        timeout: float = 120.0,
        estimator: Estimator = estimate_tokens,
        client: httpx.Client | None = None,
    ):
        super().__init__(budget, estimator)
        endpoint = endpoint.rstrip("/")
        if not endpoint.endswith("/chat/completions"):
            endpoint += "/chat/completions"
        self.url = endpoint
        self.model = model
        self.api_key = api_key
        self._client = client or httpx.Client(timeout=timeout)

    @property
    def live(self) -> bool:
        return True

    @staticmethod
    def _content(message: ChatMessage) -> Any:
        if not message.attachments:
            return message.text
        parts: list[dict[str, Any]] = [{"type": "text", "text": message.text}]
        for ref in message.attachments:
            path = Path(ref)
            if not path.is_file():
                raise RequestRejectedError(f"attachment {ref!r} not found")
            mime = mimetypes.guess_type(path.name)[0] or "image/png"
            data = base64.b64encode(path.read_bytes()).decode("ascii")
            parts.append({"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}})
        return parts

    def payload(self, messages: Sequence[ChatMessage], params: GenParams) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": self._content(m)} for m in messages],
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        body.update(params.extra)
        return body

    def _complete(self, messages: list[ChatMessage], params: GenParams) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._client.post(self.url, json=self.payload(messages, params), headers=headers)
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in _RETRY_STATUS or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if not 200 <= resp.status_code < 300:
            raise RequestRejectedError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion body: {resp.text[:200]}") from exc
        if not isinstance(content, str):
            raise ProtocolError("completion content is not a string")
        return content

    def close(self) -> None:
        self._client.close()


def no_backoff(attempt: int) -> float:
    return 0.0


def exponential_backoff(base: float = 1.0, cap: float = 30.0, seed: int = 0) -> Callable[[int], float]:
    """Full-jitter exponential delays; seeded so timings are reproducible."""
    rng = random.Random(seed)
    lock = threading.Lock()

    def delay(attempt: int) -> float:
        with lock:
            return rng.uniform(0, min(cap, base * 2 ** (attempt - 1)))

    return delay


def with_retries(
    call: Callable[[int], T],
    max_attempts: int = 10,
    backoff: Callable[[int], float] = no_backoff,
    retry_on: Callable[[BaseException], bool] = is_retryable,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[T, int]:
    """Run ``call(attempt)`` until it succeeds; returns ``(result, attempts)``.

    Errors rejected by ``retry_on`` propagate immediately. After
    ``max_attempts`` failures a RetriesExhaustedError wraps the last one.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    for attempt in range(1, max_attempts + 1):
        try:
            return call(attempt), attempt
        except Exception as exc:
            if not retry_on(exc):
                raise
            if attempt == max_attempts:
                raise RetriesExhaustedError(attempt, exc) from exc
            log.debug("attempt %d failed: %s", attempt, exc)
            wait = backoff(attempt)
            if wait > 0:
                sleep(wait)
    raise AssertionError("unreachable")


def run_parallel(jobs: Sequence[Callable[[], T]], workers: int = 1) -> list[T | Exception]:
    """Run jobs with at most ``workers`` in flight; results follow input order.

    A job that raises leaves its exception in its slot, like
    ``asyncio.gather(..., return_exceptions=True)``.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def guarded(job: Callable[[], T]) -> T | Exception:
        try:
            return job()
        except Exception as exc:
            return exc

    if workers == 1:
        return [guarded(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, jobs))


def backend_from_config(cfg: dict[str, Any], budget: TokenBudget, base_dir: Path | None = None) -> ChatBackend:
    """Build a backend from the ``[backend]`` config section."""
    if cfg.get("scripted"):
        path = Path(cfg["scripted"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScriptedBackend.from_file(path, budget=budget)
    if not cfg.get("endpoint") or not cfg.get("model"):
        raise ValueError("backend needs either 'scripted' or both 'endpoint' and 'model'")
    key = os.environ.get(cfg.get("api_key_env", "OPENAI_API_KEY"))
    return OpenAICompatibleBackend(
        cfg["endpoint"], cfg["model"], api_key=key, budget=budget,
        timeout=float(cfg.get("timeout", 120.0)),
    )

"""Access to a text-completion backend plus response accounting.

Every successful response is counted against the calling module in a
:class:`BudgetLedger`; the ledger totals are the cost metrics reported by the
harness.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import requests

from .core import TumsError

log = logging.getLogger(__name__)

MODULES = ("recognizer", "decomposer", "processor")


class BackendError(TumsError):
    """Infrastructure failure; aborts the current episode."""


class BackendUnreachable(BackendError):
    pass


class BackendRejected(BackendError):
    def __init__(self, message: str, status: int | None = None, detail: str = ""):
        super().__init__(message)
        self.status = status
        self.detail = detail


class MissingApiKey(BackendError):
    pass


class ScriptExhausted(BackendUnreachable):
    pass


class ScriptMismatch(BackendError):
    def __init__(self, expected: str, prompt: str):
        super().__init__(f"prompt does not contain expected substring {expected!r}")
        self.expected = expected
        self.prompt = prompt


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 0.0
    max_tokens: int = 256
    seed: int = 0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


class BudgetLedger:
    """Thread-safe response counter keyed by calling module."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts = dict.fromkeys(MODULES, 0)

    def record(self, module: str, n: int = 1) -> None:
        if module not in self._counts:
            raise ValueError(f"unknown module {module!r}")
        with self._lock:
            self._counts[module] += n

    def merge(self, other: BudgetLedger) -> None:
        for module, n in other.per_module.items():
            self.record(module, n)

    @property
    def per_module(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    @property
    def total_responses(self) -> int:
        return sum(self.per_module.values())

    def to_dict(self) -> dict[str, object]:
        per = self.per_module
        return {"total_responses": sum(per.values()), "per_module": per}


class Backend(Protocol):
    def generate(self, prompt: str, config: GenerationConfig) -> str: ...


@dataclass(frozen=True)
class CallRecord:
    caller: str
    tag: str
    prompt: str
    response: str


class Gateway:
    """Binds a backend to a ledger and per-module generation settings.

    ``tag`` labels each call (e.g. ``serial:SQLInterpreter:skeleton``) so runs
    can be audited after the fact; tags do not affect the request.
    """

    def __init__(
        self,
        backend: Backend,
        ledger: BudgetLedger | None = None,
        config: GenerationConfig | None = None,
        module_configs: Mapping[str, GenerationConfig] | None = None,
    ):
        self.backend = backend
        self.ledger = ledger if ledger is not None else BudgetLedger()
        self.config = config or GenerationConfig()
        self.module_configs = dict(module_configs or {})
        self.calls: list[CallRecord] = []
        self._lock = threading.Lock()

    def complete(
        self,
        prompt: str,
        caller: str,
        config: GenerationConfig | None = None,
        tag: str = "",
    ) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if caller not in MODULES:
            raise ValueError(f"unknown caller module {caller!r}")
        cfg = config or self.module_configs.get(caller, self.config)
        text = self.backend.generate(prompt, cfg)
        self.ledger.record(caller)
        with self._lock:
            self.calls.append(CallRecord(caller, tag, prompt, text))
        return text

    def fork(self) -> Gateway:
        """Same backend and settings, fresh ledger and call log."""
        return Gateway(self.backend, None, self.config, self.module_configs)


# --- scripted backend -------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    response: str
    expect: str | None = None


class ScriptedBackend:
    """Replays a fixed list of responses in order.

    Entries may carry an expected prompt substring; a prompt lacking it raises
    :class:`ScriptMismatch`. Calls are serialized to preserve script order.
    """

    def __init__(self, script: Iterable[ScriptEntry | tuple[str | None, str] | str]):
        entries = [_as_entry(e) for e in script]
        if not entries:
            raise ValueError("script must contain at least one entry")
        self.entries: tuple[ScriptEntry, ...] = tuple(entries)
        self.prompts: list[str] = []
        self._pos = 0
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return len(self.entries) - self._pos

    def generate(self, prompt: str, config: GenerationConfig) -> str:
        with self._lock:
            if self._pos >= len(self.entries):
                raise ScriptExhausted(f"script exhausted after {len(self.entries)} responses")
            entry = self.entries[self._pos]
            if entry.expect is not None and entry.expect not in prompt:
                raise ScriptMismatch(entry.expect, prompt)
            self._pos += 1
            self.prompts.append(prompt)
            return entry.response

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        """Load a script from a JSON list or JSON lines of ``{"response", "expect"?}``."""
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.lstrip()
        if stripped.startswith("["):
            records = json.loads(stripped)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(ScriptEntry(r["response"], r.get("expect")) for r in records)


def _as_entry(e: ScriptEntry | tuple[str | None, str] | str) -> ScriptEntry:
    if isinstance(e, ScriptEntry):
        return e
    if isinstance(e, str):
        return ScriptEntry(e)
    expect, response = e
    return ScriptEntry(response, expect)


def new_scripted_backend(script: Sequence[ScriptEntry | tuple[str | None, str] | str]) -> ScriptedBackend:
    return ScriptedBackend(script)


# --- HTTP backend -----------------------------------------------------------

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


@dataclass
class HttpBackend:
    """OpenAI-style ``/chat/completions`` client.

    The API key is read from ``api_key_env`` on first use, never stored in
    config files or flags.
    """

    endpoint_url: str
    api_key_env: str
    model_name: str
    attempts: int = 3
    backoff_base: float = 1.0
    timeout: float = 120.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    @property
    def url(self) -> str:
        url = self.endpoint_url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        return url

    def payload(self, prompt: str, config: GenerationConfig) -> dict[str, object]:
        body: dict[str, object] = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "seed": config.seed,
        }
        if config.stop_sequences:
            body["stop"] = list(config.stop_sequences)
        return body

    def generate(self, prompt: str, config: GenerationConfig) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise MissingApiKey(f"environment variable {self.api_key_env} is not set")
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        body = self.payload(prompt, config)
        last = ""
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("request to %s failed (attempt %d): %s", self.url, attempt + 1, last)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}: {resp.text[:500]}"
                log.warning("retryable status from %s (attempt %d): %s", self.url, attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise BackendRejected(
                    f"backend rejected request with HTTP {resp.status_code}",
                    status=resp.status_code,
                    detail=resp.text[:2000],
                )
            return _first_choice_text(resp)
        raise BackendUnreachable(f"no response from {self.url} after {self.attempts} attempts; last error: {last}")


def _first_choice_text(resp: requests.Response) -> str:
    try:
        choice = resp.json()["choices"][0]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendRejected(
            f"malformed response body ({type(exc).__name__})", resp.status_code, resp.text[:2000]
        ) from None
    message = choice.get("message") if isinstance(choice, dict) else None
    if isinstance(message, dict):
        content = message.get("content")
    else:
        content = choice.get("text") if isinstance(choice, dict) else None
    return content or ""


def new_http_backend(endpoint_url: str, api_key_env: str, model_name: str) -> HttpBackend:
    return HttpBackend(endpoint_url, api_key_env, model_name)

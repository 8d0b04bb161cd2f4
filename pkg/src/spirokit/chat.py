"""Chat-completion client for OpenAI-compatible endpoints.

All network use in the toolkit goes through ChatClient.  The transport is
pluggable so every test and offline run can use recorded fixtures or
scripted stand-ins instead of a live endpoint:

* ``http(s)://...``      real endpoint (API key read from an env var)
* ``fixtures:<path>``    replay recorded exchanges from a json-lines file
* ``mock://metric-gate`` deterministic scripted endpoint (see mocks module)
* ``mock://always-valid``

Recorded fixture files hold one json object per line with the request hash
and the stored response body.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import EndpointUnreachable

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class TransportConnectionError(Exception):
    """Raised by transports when the endpoint cannot be reached at all."""


@dataclass(frozen=True)
class ChatEndpointConfig:
    base_url: str
    model: str = "default"
    api_key_env: str = "SPIROKIT_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 4
    temperature: float = 0.0

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class ChatResult:
    status: int
    text: str
    raw_body: str

    @property
    def ok(self) -> bool:
        return self.status == 200


def request_key(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class HttpTransport:
    def __init__(self, config: ChatEndpointConfig):
        import requests

        self._requests = requests
        self._session = requests.Session()
        base = config.base_url.rstrip("/")
        self.url = base if base.endswith("/chat/completions") else base + "/chat/completions"
        self.timeout_s = config.timeout_s
        self.api_key = os.environ.get(config.api_key_env, "")

    def __call__(self, payload: dict) -> tuple[int, dict | str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(self.url, json=payload, headers=headers,
                                      timeout=self.timeout_s)
        except self._requests.exceptions.RequestException as exc:
            raise TransportConnectionError(str(exc)) from exc
        try:
            return resp.status_code, resp.json()
        except ValueError:
            return resp.status_code, resp.text


class FixtureTransport:
    """Replay (and optionally record) exchanges keyed by request hash."""

    def __init__(self, path: str | Path, record_with=None):
        self.path = Path(path)
        self.record_with = record_with
        self._lock = threading.Lock()
        self._store: dict[str, dict] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._store[entry["key"]] = entry
        elif record_with is None:
            raise FileNotFoundError(f"fixture file {self.path} does not exist")

    def __call__(self, payload: dict) -> tuple[int, dict | str]:
        key = request_key(payload)
        with self._lock:
            entry = self._store.get(key)
        if entry is None:
            if self.record_with is None:
                raise TransportConnectionError(
                    f"no recorded fixture for request {key[:12]}… in {self.path}")
            status, body = self.record_with(payload)
            entry = {"key": key, "status": status, "body": body}
            with self._lock:
                self._store[key] = entry
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(json.dumps(entry) + "\n")
        return entry["status"], entry["body"]


def make_transport(config: ChatEndpointConfig):
    url = config.base_url
    if url.startswith(("http://", "https://")):
        return HttpTransport(config)
    if url.startswith("fixtures:"):
        return FixtureTransport(url[len("fixtures:"):])
    if url.startswith("mock://"):
        from . import mocks

        return mocks.make_mock_transport(url)
    # bare filesystem path: treat as a fixture file
    return FixtureTransport(url)


class ChatClient:
    """Bounded-concurrency chat client with retries and backoff.

    Retries connection failures and retryable HTTP statuses up to
    ``max_retries`` times; exhausting retries on connection errors raises
    EndpointUnreachable, while a final HTTP error is returned as a
    ChatResult for the caller to interpret.
    """

    def __init__(self, config: ChatEndpointConfig, transport=None, sleep=time.sleep):
        self.config = config
        self.transport = transport if transport is not None else make_transport(config)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def complete(self, user_text: str, system_text: str = "",
                 extra_user_parts: list | None = None) -> ChatResult:
        messages = []
        if system_text:
            messages.append({"role": "system", "content": system_text})
        if extra_user_parts:
            content = [{"type": "text", "text": user_text}] + list(extra_user_parts)
        else:
            content = user_text
        messages.append({"role": "user", "content": content})
        payload = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        }

        attempts = self.config.max_retries + 1
        last_exc = None
        status, body = None, None
        with self._slots:
            for attempt in range(attempts):
                if attempt:
                    self._sleep(0.5 * 2 ** (attempt - 1))
                try:
                    status, body = self.transport(payload)
                except TransportConnectionError as exc:
                    last_exc = exc
                    continue
                if status not in RETRYABLE_STATUSES:
                    break
        if status is None:
            raise EndpointUnreachable(str(last_exc))

        raw = body if isinstance(body, str) else json.dumps(body)
        text = ""
        if isinstance(body, dict):
            choices = body.get("choices") or []
            if choices:
                message = choices[0].get("message") or {}
                text = message.get("content") or ""
        return ChatResult(status=status, text=text, raw_body=raw)

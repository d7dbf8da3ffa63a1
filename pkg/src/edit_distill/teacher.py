"""Teacher endpoint client: chat-completions wire format, offline fixtures.

Live mode posts a message list to an HTTP endpoint and reads back the
first choice's message content. Fixture mode resolves each request to a
canned response file named by the request hash; it never touches the
network, which is what makes the whole pipeline replayable byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import requests

ENV_URL = "EDIT_TEACHER_URL"
ENV_KEY = "EDIT_TEACHER_KEY"


class TeacherError(RuntimeError):
    pass


class PartialOutputError(TeacherError):
    """Some requests failed after retries; carries what did succeed."""

    def __init__(self, failed_ids: Sequence[str], partial):
        super().__init__("teacher requests failed for ids: " + ", ".join(failed_ids))
        self.failed_ids = list(failed_ids)
        self.partial = partial


@dataclass(frozen=True)
class TeacherConfig:
    endpoint: str = ""
    model: str = "teacher"
    temperature: float = 0.2
    top_p: float = 1.0
    max_new_tokens: int = 2048
    retries: int = 3
    fixture_dir: str | None = None
    api_key: str | None = None
    concurrency: int = 4
    rate_limit_per_sec: float | None = None
    timeout_sec: float = 60.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.fixture_dir and self.endpoint:
            raise ValueError("fixture mode and live mode are mutually exclusive")
        if not self.fixture_dir and not self.endpoint:
            raise ValueError("either endpoint or fixture_dir is required")

    @classmethod
    def from_env(cls, **overrides) -> "TeacherConfig":
        endpoint = overrides.pop("endpoint", None) or os.environ.get(ENV_URL, "")
        api_key = overrides.pop("api_key", None) or os.environ.get(ENV_KEY)
        return cls(endpoint=endpoint, api_key=api_key, **overrides)


def request_key(config: TeacherConfig, messages: Sequence[dict]) -> str:
    """Stable hash identifying one request; fixture files are named by it."""
    payload = {
        "model": config.model,
        "temperature": config.temperature,
        "top_p": config.top_p,
        "max_new_tokens": config.max_new_tokens,
        "messages": list(messages),
    }
    blob = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:32]


def write_fixture(fixture_dir: str | Path, key: str, content: str) -> Path:
    path = Path(fixture_dir) / f"{key}.json"
    path.write_text(
        json.dumps({"content": content}, ensure_ascii=False, sort_keys=True),
        encoding="utf-8",
    )
    return path


class _TokenBucket:
    def __init__(self, rate_per_sec: float):
        self.rate = rate_per_sec
        self.capacity = max(1.0, rate_per_sec)
        self.tokens = self.capacity
        self.last = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


@dataclass
class TeacherClient:
    config: TeacherConfig
    _bucket: _TokenBucket | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        if self.config.rate_limit_per_sec:
            self._bucket = _TokenBucket(self.config.rate_limit_per_sec)

    def complete(self, messages: Sequence[dict]) -> str:
        """One completion: fixture lookup offline, HTTP with retries live."""
        if self.config.fixture_dir is not None:
            return self._fixture_lookup(messages)
        return self._http_complete(messages)

    def complete_many(
        self,
        keyed_messages: Sequence[tuple[str, Sequence[dict]]],
        on_result: Callable[[str, str], None] | None = None,
    ) -> tuple[dict[str, str], list[str]]:
        """Run many requests, preserving input order in the returned map.

        Returns (id -> response text, failed ids). Concurrency is bounded
        by the config; results are collected by input position so output
        ordering never depends on completion order.
        """
        results: dict[str, str] = {}
        failed: list[str] = []

        def run_one(item: tuple[str, Sequence[dict]]) -> tuple[str, str | None]:
            rid, messages = item
            try:
                return rid, self.complete(messages)
            except TeacherError:
                return rid, None

        workers = max(1, self.config.concurrency)
        if workers == 1 or len(keyed_messages) <= 1:
            outcomes = [run_one(item) for item in keyed_messages]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(run_one, keyed_messages))
        for rid, text in outcomes:
            if text is None:
                failed.append(rid)
            else:
                results[rid] = text
                if on_result is not None:
                    on_result(rid, text)
        return results, failed

    def _fixture_lookup(self, messages: Sequence[dict]) -> str:
        key = request_key(self.config, messages)
        path = Path(self.config.fixture_dir) / f"{key}.json"
        if not path.exists():
            raise TeacherError(f"missing fixture {path}")
        return json.loads(path.read_text(encoding="utf-8"))["content"]

    def _http_complete(self, messages: Sequence[dict]) -> str:
        if self._bucket is not None:
            self._bucket.acquire()
        payload = {
            "model": self.config.model,
            "messages": list(messages),
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_new_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        last_error: Exception | None = None
        for attempt in range(max(1, self.config.retries)):
            try:
                resp = requests.post(
                    self.config.endpoint,
                    json=payload,
                    headers=headers,
                    timeout=self.config.timeout_sec,
                )
                resp.raise_for_status()
                body = resp.json()
                content = body["choices"][0]["message"]["content"]
                if not isinstance(content, str):
                    raise TeacherError("endpoint returned non-text content")
                return content
            except Exception as exc:  # noqa: BLE001 - retry any transport fault
                last_error = exc
                if attempt < self.config.retries - 1:
                    time.sleep(min(2.0, 0.1 * 2**attempt))
        raise TeacherError(f"teacher request failed after retries: {last_error}")


def user_message(content: str) -> list[dict]:
    return [{"role": "user", "content": content}]

"""HTTP plumbing shared by the remote captioner and the remote text encoder.

Both speak the OpenAI-compatible wire format (``/chat/completions`` and
``/embeddings``) and persist results in JSON-lines caches.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class RemoteError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, body: str | None = None):
        super().__init__(message if status is None else f"{message} (HTTP {status}): {body}")
        self.status = status
        self.body = body


@dataclass
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 4
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    concurrency: int = 4

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env)

    def headers(self) -> dict[str, str]:
        key = self.api_key()
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def url(self, path: str) -> str:
        return self.base_url.rstrip("/") + "/" + path.lstrip("/")


def _retry_delay(cfg: EndpointConfig, attempt: int, response: httpx.Response | None) -> float:
    delay = cfg.backoff_base * (2**attempt)
    if response is not None:
        try:
            delay = max(delay, float(response.headers.get("retry-after", 0)))
        except ValueError:
            pass
    return min(delay, cfg.backoff_max)


def post_json(client: httpx.Client, cfg: EndpointConfig, path: str, payload: dict) -> dict:
    """POST with exponential backoff on transient failures."""
    url = cfg.url(path)
    for attempt in range(cfg.max_retries + 1):
        response = None
        try:
            response = client.post(url, json=payload, headers=cfg.headers(), timeout=cfg.timeout)
        except httpx.TransportError as exc:
            if attempt == cfg.max_retries:
                raise RemoteError(f"request to {url} failed after {attempt + 1} attempts: {exc}") from exc
            log.warning("transport error on %s (%s), retrying", url, exc)
        else:
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as exc:
                    raise RemoteError("response is not JSON", 200, response.text[:500]) from exc
            if response.status_code not in RETRYABLE_STATUS:
                raise RemoteError("non-retryable response", response.status_code, response.text[:500])
            if attempt == cfg.max_retries:
                raise RemoteError(
                    f"retries exhausted after {attempt + 1} attempts",
                    response.status_code,
                    response.text[:500],
                )
            log.warning("HTTP %d from %s, retrying", response.status_code, url)
        time.sleep(_retry_delay(cfg, attempt, response))
    raise AssertionError("unreachable")


class JsonlCache:
    """Append-only JSON-lines store keyed by one record field.

    Writes go through a lock and are flushed in key order, so a batch
    produces the same bytes regardless of completion order.
    """

    def __init__(self, path, key_field: str):
        self.path = Path(path) if path else None
        self.key_field = key_field
        self._lock = threading.Lock()
        self._data: dict[str, dict] = {}
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._data[rec[key_field]] = rec

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> dict | None:
        return self._data.get(key)

    def put_many(self, records: list[dict]) -> None:
        with self._lock:
            fresh = {}
            for rec in records:
                key = rec[self.key_field]
                if key not in self._data:
                    fresh[key] = rec
            if not fresh:
                return
            self._data.update(fresh)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                    for key in sorted(fresh):
                        fh.write(json.dumps(fresh[key], sort_keys=True) + "\n")

    def put(self, record: dict) -> None:
        self.put_many([record])

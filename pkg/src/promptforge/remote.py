"""Chat-completions client with bounded concurrency and exponential backoff."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import requests

from promptforge.envs import WorkerError

log = logging.getLogger(__name__)

API_KEY_ENV = "PROMPTFORGE_API_KEY"
RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


class ReplyParseError(ValueError):
    def __init__(self, message: str, raw_body: str):
        super().__init__(message)
        self.raw_body = raw_body


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    temperature: float = 0.0
    max_in_flight: int = 4
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"


@dataclass
class Reply:
    text: str
    usage: dict | None = None
    attempts: int = 1


@dataclass
class ChatClient:
    config: EndpointConfig
    api_key: str | None = None
    sleep: Callable[[float], None] = time.sleep
    session: requests.Session = field(default_factory=requests.Session)

    def __post_init__(self):
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV)
        self._gate = threading.BoundedSemaphore(max(1, self.config.max_in_flight))

    @property
    def max_in_flight(self) -> int:
        return self.config.max_in_flight

    def payload(self, system: str, user: str) -> dict:
        return {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.config.temperature,
        }

    def chat(self, system: str, user: str) -> Reply:
        return remote_call(self, self.payload(system, user))


def _parse(body: str) -> tuple[str, dict | None]:
    import json

    try:
        doc = json.loads(body)
        text = doc["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ReplyParseError(f"malformed chat-completions reply: {exc!r}", body) from None
    if not isinstance(text, str):
        raise ReplyParseError("reply content is not text", body)
    return text, doc.get("usage")


def remote_call(client: ChatClient, payload: dict) -> Reply:
    """POST ``payload``; retry 429/5xx and transport errors with delays base*factor**i."""
    cfg = client.config
    headers = {"Content-Type": "application/json"}
    if client.api_key:
        headers["Authorization"] = f"Bearer {client.api_key}"
    attempts: list[str] = []
    for attempt in range(1, cfg.max_attempts + 1):
        with client._gate:
            try:
                resp = client.session.post(cfg.url, json=payload, headers=headers, timeout=cfg.timeout)
            except requests.RequestException as exc:
                attempts.append(f"attempt {attempt}: {type(exc).__name__}: {exc}")
                resp = None
        if resp is not None:
            if resp.status_code == 200:
                text, usage = _parse(resp.text)
                return Reply(text, usage, attempt)
            attempts.append(f"attempt {attempt}: HTTP {resp.status_code}")
            if resp.status_code not in RETRY_STATUSES:
                raise WorkerError(f"endpoint returned HTTP {resp.status_code}", attempts)
        if attempt < cfg.max_attempts:
            delay = cfg.backoff_base * cfg.backoff_factor ** (attempt - 1)
            log.warning("retrying %s in %.1fs (%s)", cfg.url, delay, attempts[-1])
            client.sleep(delay)
    raise WorkerError(f"endpoint failed after {cfg.max_attempts} attempts", attempts)

"""Chat-completion gateway with live, record, replay, and mock modes.

Requests are keyed by a digest over their canonical form, so a transcript
recorded once replays deterministically regardless of incidental code changes.
Credentials come from the environment and are never written to transcripts,
logs, or error messages.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import requests

from .canonical import digest_of
from .errors import AuthMissing, ReplayMiss, TransportExhausted

MODES = ("live", "record", "replay", "mock")
ROLES = ("system", "user", "assistant")

ENV_ENDPOINT = "LLM_ENDPOINT"
ENV_API_KEY = "LLM_API_KEY"
ENV_MODEL = "LLM_MODEL"

_RETRY_DELAYS = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class ChatParams:
    temperature: float = 0.2
    max_tokens: int = 1024
    model_name: str = ""


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Mapping[str, str], ...]
    params: ChatParams

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        for msg in self.messages:
            if msg.get("role") not in ROLES or not isinstance(msg.get("content"), str):
                raise ValueError(f"malformed message {msg!r}")

    @property
    def request_digest(self) -> str:
        return digest_of(
            {
                "messages": [{"role": m["role"], "content": m["content"]} for m in self.messages],
                "params": {
                    "temperature": self.params.temperature,
                    "max_tokens": self.params.max_tokens,
                    "model_name": self.params.model_name,
                },
            }
        )


def chat_request(messages: Sequence[Mapping[str, str]], params: Optional[ChatParams] = None) -> ChatRequest:
    return ChatRequest(messages=tuple(dict(m) for m in messages), params=params or ChatParams())


def load_transcript(path: str | Path) -> dict[str, str]:
    """Digest -> response text map; the first occurrence of a digest wins."""
    table: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            table.setdefault(obj["request_digest"], obj["response_text"])
    return table


class Gateway:
    """Uniform completion interface over the four access modes."""

    def __init__(
        self,
        mode: str = "mock",
        endpoint: Optional[str] = None,
        api_key: Optional[str] = None,
        model_name: Optional[str] = None,
        transcript_path: Optional[str | Path] = None,
        mock_queue: Optional[Sequence[str]] = None,
        mock_table: Optional[Mapping[str, str]] = None,
        sleep=time.sleep,
        session: Optional[requests.Session] = None,
        timeout_s: float = 60.0,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown gateway mode {mode!r}")
        self.mode = mode
        self.endpoint = endpoint if endpoint is not None else os.environ.get(ENV_ENDPOINT)
        self._api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        self.model_name = model_name if model_name is not None else os.environ.get(ENV_MODEL, "")
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self._mock_queue = list(mock_queue) if mock_queue else []
        self._mock_table = dict(mock_table) if mock_table else {}
        self._sleep = sleep
        self._session = session or requests.Session()
        self._timeout_s = timeout_s
        self._lock = threading.Lock()
        self._replay_table: Optional[dict[str, str]] = None
        if mode == "replay":
            if self.transcript_path is None:
                raise ValueError("replay mode requires a transcript_path")
            self._replay_table = load_transcript(self.transcript_path)

    def complete(self, request: ChatRequest) -> str:
        if self.mode == "mock":
            return self._complete_mock(request)
        if self.mode == "replay":
            return self._complete_replay(request)
        text, latency_ms, usage = self._complete_live(request)
        if self.mode == "record":
            self._record(request, text, latency_ms, usage)
        return text

    def _complete_mock(self, request: ChatRequest) -> str:
        with self._lock:
            digest = request.request_digest
            if digest in self._mock_table:
                return self._mock_table[digest]
            if self._mock_queue:
                return self._mock_queue.pop(0)
        raise ReplayMiss(request.request_digest)

    def _complete_replay(self, request: ChatRequest) -> str:
        assert self._replay_table is not None
        digest = request.request_digest
        if digest not in self._replay_table:
            raise ReplayMiss(digest)
        return self._replay_table[digest]

    def _complete_live(self, request: ChatRequest) -> tuple[str, int, dict]:
        if not self.endpoint:
            raise AuthMissing(f"{ENV_ENDPOINT} not configured")
        if not self._api_key:
            raise AuthMissing(f"{ENV_API_KEY} not configured")
        body = {
            "model": request.params.model_name or self.model_name,
            "messages": [{"role": m["role"], "content": m["content"]} for m in request.messages],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self._api_key}", "Content-Type": "application/json"}
        last_error = "no attempt made"
        for attempt, delay in enumerate(_RETRY_DELAYS):
            started = time.monotonic()
            try:
                resp = self._session.post(
                    self.endpoint, json=body, headers=headers, timeout=self._timeout_s
                )
            except requests.RequestException as exc:
                last_error = type(exc).__name__
                self._sleep(delay)
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                self._sleep(delay)
                continue
            if resp.status_code != 200:
                raise TransportExhausted(f"non-retryable HTTP {resp.status_code} from endpoint")
            try:
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportExhausted(f"malformed completion body: {type(exc).__name__}") from exc
            usage = payload.get("usage", {}) if isinstance(payload, dict) else {}
            return text, latency_ms, usage
        raise TransportExhausted(f"3 attempts failed, last error: {last_error}")

    def _record(self, request: ChatRequest, text: str, latency_ms: int, usage: Mapping):
        if self.transcript_path is None:
            raise ValueError("record mode requires a transcript_path")
        entry = {
            "request_digest": request.request_digest,
            "response_text": text,
            "metadata": {
                "latency_ms": latency_ms,
                "prompt_tokens": usage.get("prompt_tokens"),
                "completion_tokens": usage.get("completion_tokens"),
            },
        }
        with self._lock:
            with open(self.transcript_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")

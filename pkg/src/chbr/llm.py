"""Chat-completions access: HTTP client, plus a scripted mock for tests.

Wire protocol: POST {base_url}/v1/chat/completions with
{model, temperature, messages:[{role:"system"|"user", content}]}. The reply
text is read from the first choice's message content. A base_url of the form
"mock://path/to/script.json" loads a MockLlm instead.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass

import requests

from .errors import PreconditionError, ProviderError

API_KEY_ENV = "CHBR_LLM_API_KEY"
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model_name: str = "gpt-4o-mini"
    request_timeout: float = 60.0
    max_in_flight: int = 4
    max_retries: int = 3
    decode_temperature: float = 1.0

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise PreconditionError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise PreconditionError("max_retries must be >= 0")
        if self.decode_temperature < 0:
            raise PreconditionError("decode_temperature must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "LlmEndpointConfig":
        return cls(**doc)


def script_key(system: str, user: str) -> str:
    """Content hash keying a (system, user) request in a mock script file."""
    blob = json.dumps([system, user], ensure_ascii=False).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


class MockLlm:
    """Scripted stand-in for the chat service.

    The script maps script_key(system, user) to either a reply string, a list
    of replies consumed in order, or {"fail": n, "reply": ...} to raise n
    transient failures before answering.
    """

    def __init__(self, script: dict):
        self.script = {k: self._normalize(v) for k, v in script.items()}
        self.calls = 0

    @staticmethod
    def _normalize(entry):
        if isinstance(entry, str):
            return {"fail": 0, "replies": [entry]}
        if isinstance(entry, list):
            return {"fail": 0, "replies": list(entry)}
        if isinstance(entry, dict):
            replies = entry.get("reply", entry.get("replies"))
            if isinstance(replies, str):
                replies = [replies]
            return {"fail": int(entry.get("fail", 0)), "replies": list(replies)}
        raise PreconditionError(f"bad mock script entry: {entry!r}")

    @classmethod
    def from_file(cls, path) -> "MockLlm":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, system: str, user: str, temperature: float = 0.0) -> str:
        self.calls += 1
        key = script_key(system, user)
        entry = self.script.get(key)
        if entry is None:
            raise ProviderError(
                f"mock script has no entry for request key {key} "
                f"(system={system[:60]!r}..., user={user[:120]!r})"
            )
        if entry["fail"] > 0:
            entry["fail"] -= 1
            raise ProviderError("scripted transient failure", status=500)
        replies = entry["replies"]
        if len(replies) > 1:
            return replies.pop(0)
        return replies[0]


class HttpLlm:
    """requests-backed chat client with capped exponential backoff."""

    def __init__(self, config: LlmEndpointConfig, session=None, sleep=time.sleep,
                 backoff_base: float = 0.5, backoff_cap: float = 8.0):
        self.config = config
        self.session = session or requests.Session()
        self.sleep = sleep
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, system: str, user: str, temperature: float = 0.0) -> str:
        cfg = self.config
        body = {
            "model": cfg.model_name,
            "temperature": temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        attempt = 0
        retries = 0
        while True:
            try:
                resp = self.session.post(
                    f"{cfg.base_url.rstrip('/')}/v1/chat/completions",
                    json=body,
                    headers=self._headers(),
                    timeout=cfg.request_timeout,
                )
                status, text = resp.status_code, resp.text
            except requests.RequestException as exc:
                status, text = None, str(exc)
            if status == 200:
                doc = resp.json()
                return doc["choices"][0]["message"]["content"]
            if (status is None or status in RETRYABLE_STATUSES) and attempt < cfg.max_retries:
                self.sleep(min(self.backoff_cap, self.backoff_base * 2**attempt))
                attempt += 1
                retries += 1
                continue
            raise ProviderError(
                f"chat request failed with status {status}",
                status=status,
                body=(text or "")[:500],
                retries=retries,
            )


def make_llm(config: LlmEndpointConfig):
    """HttpLlm for http(s) base_urls, MockLlm for mock://<script-path>."""
    if config.base_url.startswith("mock://"):
        return MockLlm.from_file(config.base_url[len("mock://"):])
    return HttpLlm(config)


def with_retries(llm, system: str, user: str, temperature: float, max_retries: int) -> str:
    """Retry transient ProviderErrors from mock-style llms that raise per call."""
    for attempt in range(max_retries + 1):
        try:
            return llm.complete(system, user, temperature=temperature)
        except ProviderError as exc:
            transient = exc.status in RETRYABLE_STATUSES
            if not transient or attempt == max_retries:
                raise
    raise AssertionError("unreachable")

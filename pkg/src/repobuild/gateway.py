"""Chat-completion gateway.

Two backends behind one `complete()` call: a live HTTP backend speaking the
common chat-completion wire protocol, and a scripted backend that replays a
deterministic scenario for tests. Model identity is pure configuration.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Pattern, Sequence, Tuple, Union

import requests

from .errors import OversizeReplyError, ScenarioExhaustedError, TransportError

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

# environment variables consulted by the live backend
ENV_BASE_URL = "REPOBUILD_LLM_BASE_URL"
ENV_API_KEY = "REPOBUILD_LLM_API_KEY"

_RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}

Matcher = Union[str, Pattern]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown message role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message must have content")


@dataclass
class ScriptedScenario:
    """Ordered (matcher, reply) steps evaluated against the latest user message.

    A string matcher is a substring test; a compiled pattern is searched.
    The first matching step wins; with no match the default reply is used.
    """

    steps: List[Tuple[Matcher, str]] = field(default_factory=list)
    default_reply: Optional[str] = None

    def resolve(self, latest_user: str) -> str:
        for matcher, reply in self.steps:
            if isinstance(matcher, str):
                if matcher in latest_user:
                    return reply
            elif matcher.search(latest_user):
                return reply
        if self.default_reply is not None:
            return self.default_reply
        raise ScenarioExhaustedError(
            f"no scripted step matches user message starting {latest_user[:80]!r}"
        )


@dataclass
class LlmConfig:
    backend: str = "live"  # live | scripted
    model_name: str = "default"
    temperature: float = 0.0
    max_reply_chars: int = 200_000
    request_timeout: float = 120.0
    max_retries: int = 3
    scenario: Optional[ScriptedScenario] = None

    def __post_init__(self):
        if self.backend not in ("live", "scripted"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_reply_chars <= 0:
            raise ValueError("max_reply_chars must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backend == "scripted" and self.scenario is None:
            raise ValueError("scripted backend requires a scenario")


def scripted_config(scenario: ScriptedScenario, **overrides) -> LlmConfig:
    return LlmConfig(backend="scripted", scenario=scenario, **overrides)


def complete(
    config: LlmConfig,
    messages: Sequence[ChatMessage],
    recorder: Optional[Callable[[Sequence[ChatMessage], str], None]] = None,
) -> str:
    """Return the assistant reply for a conversation.

    The last message must be from the user. Replies longer than
    ``max_reply_chars`` raise; live transport failures are retried with
    exponential backoff up to ``max_retries`` times before raising.
    """
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[-1].role != "user":
        raise ValueError("last message must have role 'user'")

    if config.backend == "scripted":
        reply = config.scenario.resolve(messages[-1].content)
    else:
        reply = _live_complete(config, messages)

    if len(reply) > config.max_reply_chars:
        raise OversizeReplyError(
            f"reply of {len(reply)} chars exceeds cap {config.max_reply_chars}"
        )
    if recorder is not None:
        recorder(messages, reply)
    return reply


def _live_complete(config: LlmConfig, messages: Sequence[ChatMessage]) -> str:
    base = os.environ.get(ENV_BASE_URL)
    if not base:
        raise TransportError(f"{ENV_BASE_URL} is not set; live backend unavailable")
    url = base.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(ENV_API_KEY)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [{"role": m.role, "content": m.content} for m in messages],
    }

    last_err: Optional[str] = None
    for attempt in range(config.max_retries + 1):
        if attempt:
            delay = min(2.0 ** attempt, 30.0)
            logger.info("retrying chat completion in %.1fs (attempt %d)", delay, attempt + 1)
            time.sleep(delay)
        try:
            resp = requests.post(
                url, headers=headers, data=json.dumps(payload), timeout=config.request_timeout
            )
        except requests.RequestException as exc:
            last_err = str(exc)
            continue
        if resp.status_code in _RETRYABLE_STATUS:
            last_err = f"status {resp.status_code}"
            continue
        if resp.status_code != 200:
            raise TransportError(f"chat completion failed: status {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
    raise TransportError(f"chat completion failed after retries: {last_err}")


def substring(s: str) -> str:
    """Identity helper that documents a matcher as a substring test."""
    return s


def pattern(p: str) -> Pattern:
    """Compile a regex matcher for a scripted step."""
    return re.compile(p, re.DOTALL)

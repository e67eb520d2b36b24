"""Prompt templates and a small chat-completions client for remote reasoners."""

from __future__ import annotations

import logging
import os
import string
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import httpx

from ddnav.errors import AuthError, BackendError, ConfigError, MissingBinding
from ddnav.triple import DecisionTriple, format_triple, parse_triple

__all__ = [
    "PromptTemplate",
    "TEMPLATE_FILES",
    "load_template",
    "load_templates",
    "render",
    "BackendConfig",
    "ChatClient",
    "DecisionTriple",
    "format_triple",
    "parse_triple",
]

logger = logging.getLogger(__name__)

TEMPLATE_FILES = {
    "P_m": "demand.txt",
    "P_e": "explore.txt",
    "P_x": "exploit.txt",
    "P_r": "reflection.txt",
}


def _placeholders(body: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(body) if name is not None]


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset[str]

    def __post_init__(self) -> None:
        if self.name not in TEMPLATE_FILES:
            raise ConfigError(f"unknown template name {self.name!r}")
        found = _placeholders(self.body)
        for ph in self.required_placeholders:
            n = found.count(ph)
            if n != 1:
                raise ConfigError(f"template {self.name}: placeholder {{{ph}}} appears {n} times, expected once")

    @classmethod
    def from_text(cls, name: str, text: str) -> PromptTemplate:
        # Lines starting with '##' are file-header comments.
        body = "\n".join(line for line in text.splitlines() if not line.startswith("##")).strip() + "\n"
        return cls(name, body, frozenset(_placeholders(body)))


def load_template(name: str, directory: str | Path | None = None) -> PromptTemplate:
    fname = TEMPLATE_FILES[name]
    if directory is None:
        text = resources.files("ddnav.prompts").joinpath(fname).read_text(encoding="utf-8")
    else:
        text = (Path(directory) / fname).read_text(encoding="utf-8")
    return PromptTemplate.from_text(name, text)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    return {name: load_template(name, directory) for name in TEMPLATE_FILES}


def render(template: PromptTemplate, bindings: Mapping[str, object]) -> str:
    missing = sorted(template.required_placeholders - set(bindings))
    if missing:
        raise MissingBinding(f"template {template.name} needs {', '.join(missing)}")
    extra = sorted(set(bindings) - template.required_placeholders)
    if extra:
        logger.warning("template %s ignores bindings: %s", template.name, ", ".join(extra))
    return template.body.format(**{k: bindings[k] for k in template.required_placeholders})


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    model: str = "gpt-4"
    api_key_env: str = "DDNAV_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **overrides) -> BackendConfig:
        env = os.environ
        values = {
            "endpoint": env.get("DDNAV_LLM_ENDPOINT", "http://127.0.0.1:8000/v1/chat/completions"),
            "model": env.get("DDNAV_LLM_MODEL", "gpt-4"),
            "api_key_env": env.get("DDNAV_LLM_KEY_VAR", "DDNAV_API_KEY"),
            "timeout": float(env.get("DDNAV_LLM_TIMEOUT", "30")),
            "max_retries": int(env.get("DDNAV_LLM_RETRIES", "2")),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) or None


_RETRYABLE = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatClient:
    """Blocking chat-completions client with retry and exponential backoff.

    Thread safe: httpx.Client may be shared across threads.
    """

    def __init__(self, config: BackendConfig, *, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> ChatClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def complete(self, system: str, user: str) -> str:
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        headers = {"Content-Type": "application/json"}
        key = self.config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last: str = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.config.endpoint, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
                logger.warning("chat request timed out (attempt %d)", attempt + 1)
                continue
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                logger.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code in _RETRYABLE:
                last = f"HTTP {resp.status_code}"
                logger.warning("chat request got HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"unexpected response shape: {exc!r}") from exc
            usage = data.get("usage") or {}
            logger.debug("chat ok: %d chars in, %d chars out, usage=%s",
                         len(system) + len(user), len(content or ""), usage)
            return content or ""
        raise BackendError(f"chat request failed after {self.config.max_retries + 1} attempts ({last})")

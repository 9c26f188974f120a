"""Chat-completion client for CoT generation and semantic path verification."""
from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import httpx

from .kg import KnowledgeGraph, ReasoningPath, TaskInstance
from .rewards import outcome_reward
from .trace import parse_trace

__all__ = [
    "ChatEndpointConfig",
    "ChatClient",
    "LLMError",
    "LLMTransportError",
    "LLMStatusError",
    "CoTSample",
    "LLMVerifier",
    "load_prompt",
    "serialize_graph",
    "serialize_path",
    "generate_cot",
    "llm_verifier",
    "parse_yes_no",
]

ENV_BASE_URL = "EOG_LLM_BASE_URL"
ENV_API_KEY = "EOG_LLM_API_KEY"
ENV_MODEL = "EOG_LLM_MODEL"


class LLMError(RuntimeError):
    pass


class LLMTransportError(LLMError):
    """Retries exhausted on transient failures (network, timeout, 429, 5xx)."""

    def __init__(self, message: str, attempts: int, status_code: int | None = None):
        self.attempts = attempts
        self.status_code = status_code
        super().__init__(message)


class LLMStatusError(LLMError):
    def __init__(self, status_code: int, body: str = ""):
        self.status_code = status_code
        super().__init__(f"chat endpoint returned HTTP {status_code}: {body[:200]}")


@dataclass(frozen=True)
class ChatEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key: str | None = field(default=None, repr=False)
    model_name: str = "gemini-2.5-flash"
    temperature: float = 0.2
    max_retries: int = 3
    timeout_seconds: int = 120
    max_concurrent_requests: int = 4
    backoff_seconds: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be > 0")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")

    @classmethod
    def from_env(cls, **overrides) -> "ChatEndpointConfig":
        env = {
            "base_url": os.environ.get(ENV_BASE_URL),
            "api_key": os.environ.get(ENV_API_KEY),
            "model_name": os.environ.get(ENV_MODEL),
        }
        kwargs = {k: v for k, v in env.items() if v}
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


class ChatClient:
    """Thread-safe chat-completion client with retries and an in-flight bound.

    ``transport`` accepts any httpx transport (``httpx.MockTransport`` in tests).
    """

    def __init__(self, cfg: ChatEndpointConfig, transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_concurrent_requests)
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._http = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            headers=headers,
            timeout=cfg.timeout_seconds,
            transport=transport,
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def payload(self, system_prompt: str, user_prompt: str) -> dict:
        return {
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "temperature": self.cfg.temperature,
        }

    def chat(self, system_prompt: str, user_prompt: str) -> str:
        if not system_prompt or not user_prompt:
            raise ValueError("prompts must be non-empty")
        body = self.payload(system_prompt, user_prompt)
        attempts = self.cfg.max_retries + 1
        last: str = ""
        last_status = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.cfg.backoff_seconds * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._http.post("/chat/completions", json=body)
            except httpx.TransportError as exc:
                last, last_status = f"{type(exc).__name__}: {exc}", None
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last, last_status = f"HTTP {resp.status_code}", resp.status_code
                continue
            if resp.status_code != 200:
                raise LLMStatusError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise LLMError(f"malformed completion response: {exc}") from None
        raise LLMTransportError(f"chat failed after {attempts} attempts ({last})", attempts, last_status)


def load_prompt(name: str) -> str:
    """Shipped template text: ``cot``, ``explore`` or ``verify``."""
    return resources.files("eog").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


SYSTEM_PROMPT = "You are a careful assistant that reasons over knowledge graphs."


def serialize_graph(g: KnowledgeGraph) -> str:
    return "\n".join(str(t) for t in g)


def serialize_path(path: ReasoningPath) -> str:
    if not path.steps:
        return path.start
    return "\n".join(str(t) for t in path.steps)


@dataclass(frozen=True)
class CoTSample:
    task_id: str
    generated_text: str
    structurally_valid: bool
    factually_valid: bool
    kept: bool


def _client(cfg_or_client) -> ChatClient:
    return cfg_or_client if isinstance(cfg_or_client, ChatClient) else ChatClient(cfg_or_client)


def generate_cot(task: TaskInstance, g: KnowledgeGraph | None, cfg_or_client, *, threshold: float = 1.0, template: str | None = None) -> CoTSample:
    """Distil one long-CoT sample and apply the structural and factual filters."""
    graph = task.subgraph if task.subgraph is not None else g
    if graph is None:
        raise ValueError(f"task {task.id!r} has no subgraph and no graph was given")
    prompt = (template or load_prompt("cot")).format(question=task.question, graph=serialize_graph(graph))
    text = _client(cfg_or_client).chat(SYSTEM_PROMPT, prompt)
    trace = parse_trace(text)
    structural = trace.format_valid
    factual = structural and outcome_reward(trace, task.gold_answers)[0] >= threshold
    return CoTSample(task.id, text, structural, factual, structural and factual)


_YES_NO = re.compile(r"^[\s\"'*`>#_\-]*(yes|no)\b", re.IGNORECASE)


def parse_yes_no(text: str) -> bool | None:
    m = _YES_NO.match(text or "")
    return None if m is None else m.group(1).lower() == "yes"


class LLMVerifier:
    """Path verifier backed by the chat endpoint; unparseable replies reject."""

    def __init__(self, client: ChatClient, template: str | None = None):
        self.client = client
        self.template = template or load_prompt("verify")

    def verify(self, question: str, path: ReasoningPath) -> tuple[bool, str]:
        prompt = self.template.format(question=question, path=serialize_path(path), graph="")
        reply = self.client.chat(SYSTEM_PROMPT, prompt)
        verdict = parse_yes_no(reply)
        if verdict is None:
            return False, f"unparseable verdict: {reply.strip()[:200]}"
        return verdict, reply.strip()


def llm_verifier(cfg_or_client) -> LLMVerifier:
    return LLMVerifier(_client(cfg_or_client))

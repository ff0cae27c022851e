"""Uniform provider contract for chat completion, plain completion and embedding.

Production traffic goes over a generic HTTP chat-completion wire protocol;
offline runs use deterministic scripted providers and a seeded feature-hashing
embedder so every pipeline run is byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import requests

from .errors import (
    EmbedderUnavailableError,
    ModelFailureError,
    ScriptExhaustedError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToolSchema:
    """Schema of one callable tool offered to the model."""

    name: str
    description: str
    parameters: dict

    def to_wire(self) -> dict:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            },
        }


@dataclass
class ModelRequest:
    messages: list[dict]  # ordered {"role": ..., "content": ...}
    tools: Optional[list[ToolSchema]] = None
    temperature: Optional[float] = None  # None defers to the provider default
    max_output_tokens: int = 2048
    model: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ModelRequest needs at least one message")
        if self.temperature is not None and self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "messages": self.messages,
                "tools": [t.name for t in self.tools] if self.tools else None,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class ModelResponse:
    kind: str  # "text" | "tool_call"
    content: str = ""
    tool_name: str = ""
    tool_arguments: dict = field(default_factory=dict)
    usage: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("text", "tool_call"):
            raise ValueError(f"unknown response kind: {self.kind}")


class InteractionLog:
    """Audit log of every request/response pair a provider handled."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def record(self, provider: str, request: ModelRequest, response: ModelResponse) -> None:
        entry = {
            "provider": provider,
            "fingerprint": request.fingerprint(),
            "messages": request.messages,
            "response": {
                "kind": response.kind,
                "content": response.content,
                "tool_name": response.tool_name,
                "tool_arguments": response.tool_arguments,
            },
        }
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self.entries)


class RateLimiter:
    """Minimum-interval limiter; a max_per_second of None disables it."""

    def __init__(self, max_per_second: Optional[float] = None):
        self._interval = 1.0 / max_per_second if max_per_second else 0.0
        self._last = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self._interval:
            return
        with self._lock:
            now = time.monotonic()
            delta = self._interval - (now - self._last)
            if delta > 0:
                time.sleep(delta)
            self._last = time.monotonic()


class ChatProvider:
    """Provider interface: subclasses implement _complete_once."""

    name = "provider"

    def __init__(self, retries: int = 3, backoff: float = 0.2,
                 interaction_log: Optional[InteractionLog] = None,
                 rate_limiter: Optional[RateLimiter] = None):
        self.retries = retries
        self.backoff = backoff
        self.interaction_log = interaction_log
        self.rate_limiter = rate_limiter or RateLimiter()

    def complete(self, request: ModelRequest) -> ModelResponse:
        """Run one completion with transient-failure retries."""
        last_err: Optional[Exception] = None
        for attempt in range(self.retries):
            self.rate_limiter.wait()
            try:
                response = self._complete_once(request)
                break
            except ScriptExhaustedError:
                raise
            except ModelFailureError as err:
                last_err = err
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        else:
            raise ModelFailureError(
                f"{self.name}: giving up after {self.retries} attempts: {last_err}"
            )
        if response.kind == "tool_call" and not request.tools:
            raise ModelFailureError(f"{self.name}: tool_call returned but no tools were offered")
        if self.interaction_log is not None:
            self.interaction_log.record(self.name, request, response)
        return response

    def _complete_once(self, request: ModelRequest) -> ModelResponse:
        raise NotImplementedError


class ScriptedProvider(ChatProvider):
    """Replays a canned transcript; deterministic by construction.

    Responses are consumed in sequence order unless an entry carries a
    "fingerprint" key, in which case it is served only to the matching request.
    """

    name = "scripted"

    def __init__(self, script: Sequence[dict], **kwargs):
        kwargs.setdefault("retries", 1)  # replay must consume one entry per call
        super().__init__(**kwargs)
        self._script = list(script)
        self._position = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str, **kwargs) -> "ScriptedProvider":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh), **kwargs)

    def _complete_once(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            keyed = {e["fingerprint"]: e for e in self._script if "fingerprint" in e}
            entry = keyed.get(request.fingerprint())
            if entry is None:
                sequential = [e for e in self._script if "fingerprint" not in e]
                if self._position >= len(sequential):
                    raise ScriptExhaustedError(
                        f"script of length {len(sequential)} exhausted at call {self._position + 1}"
                    )
                entry = sequential[self._position]
                self._position += 1
        return self._entry_to_response(entry)

    @staticmethod
    def _entry_to_response(entry: dict) -> ModelResponse:
        kind = entry.get("kind", "text")
        if kind == "tool_call":
            return ModelResponse(
                kind="tool_call",
                tool_name=entry.get("name", ""),
                tool_arguments=entry.get("arguments", {}),
            )
        if kind == "error":
            # Scripted transport failure, used to exercise degradation paths.
            raise ModelFailureError(entry.get("message", "scripted failure"))
        return ModelResponse(kind="text", content=entry.get("content", ""))


class HttpChatProvider(ChatProvider):
    """Generic chat-completion JSON protocol over HTTP.

    Endpoint, model name and credentials come from configuration; nothing is
    hardcoded so any compatible serving stack can sit behind it.
    """

    name = "http"

    def __init__(self, endpoint: str, model: str, api_key: str = "",
                 temperature: float = 0.0, timeout: float = 120.0, **kwargs):
        super().__init__(**kwargs)
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.timeout = timeout

    def _complete_once(self, request: ModelRequest) -> ModelResponse:
        payload: dict[str, Any] = {
            "model": request.model or self.model,
            "messages": request.messages,
            "temperature": self.temperature if request.temperature is None
            else request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.tools:
            payload["tools"] = [t.to_wire() for t in request.tools]
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.endpoint}/chat/completions",
                json=payload, headers=headers, timeout=self.timeout,
            )
            resp.raise_for_status()
            body = resp.json()
        except (requests.RequestException, ValueError) as err:
            raise ModelFailureError(f"transport failure: {err}") from err
        try:
            message = body["choices"][0]["message"]
        except (KeyError, IndexError) as err:
            raise ModelFailureError(f"malformed completion payload: {err}") from err
        usage = body.get("usage", {})
        calls = message.get("tool_calls")
        if calls:
            fn = calls[0].get("function", {})
            try:
                arguments = json.loads(fn.get("arguments", "{}"))
            except json.JSONDecodeError:
                arguments = {}
            return ModelResponse(
                kind="tool_call", tool_name=fn.get("name", ""),
                tool_arguments=arguments, usage=usage,
            )
        return ModelResponse(kind="text", content=message.get("content") or "", usage=usage)


def complete(request: ModelRequest, provider: ChatProvider) -> ModelResponse:
    return provider.complete(request)


# --- embedding ---------------------------------------------------------------

class Embedder:
    """Maps texts to fixed-dimension real vectors."""

    dim = 0

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        raise NotImplementedError


class HashingEmbedder(Embedder):
    """Deterministic feature-hashing embedder for offline runs.

    Tokens are hashed (salted with the seed) into `dim` signed buckets and the
    result is L2-normalized. Same text always maps to the same vector; an
    empty text maps to the zero vector.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed

    def _tokens(self, text: str) -> list[str]:
        out, cur = [], []
        for ch in text:
            if ch.isalnum() or ch == "_":
                cur.append(ch)
            elif cur:
                out.append("".join(cur).lower())
                cur = []
        if cur:
            out.append("".join(cur).lower())
        return out

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        vectors = []
        for text in texts:
            vec = [0.0] * self.dim
            for token in self._tokens(text):
                digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
                bucket = int.from_bytes(digest[:4], "big") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                # per-token magnitude jitter keeps distinct tokens from
                # cancelling to an exact zero vector in one bucket
                vec[bucket] += sign * (1.0 + digest[5] / 512.0)
            norm = math.sqrt(sum(v * v for v in vec))
            if norm > 0:
                vec = [v / norm for v in vec]
            vectors.append(vec)
        return vectors


class HttpEmbedder(Embedder):
    """Embedding endpoint speaking the generic {input: [...]} JSON protocol."""

    def __init__(self, endpoint: str, model: str, api_key: str = "",
                 dim: int = 0, timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.dim = dim
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.endpoint}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers=headers, timeout=self.timeout,
            )
            resp.raise_for_status()
            body = resp.json()
            vectors = [row["embedding"] for row in body["data"]]
        except (requests.RequestException, ValueError, KeyError) as err:
            raise EmbedderUnavailableError(f"embedding endpoint failure: {err}") from err
        if vectors and self.dim and len(vectors[0]) != self.dim:
            raise EmbedderUnavailableError(
                f"dimension mismatch: expected {self.dim}, got {len(vectors[0])}"
            )
        return vectors


def embed(texts: Sequence[str], provider: Embedder) -> list[list[float]]:
    return provider.embed(texts)


# --- prompt budgeting ---------------------------------------------------------

def fit_to_budget(fixed: Sequence[str], edits: Sequence[str], snippets: Sequence[str],
                  budget_chars: Optional[int]) -> tuple[list[str], list[str], bool]:
    """Trim variable prompt sections to fit a character budget.

    Lowest-relevance items go first: edits are dropped from the tail, then
    snippets from the tail. The fixed sections are never trimmed. Returns the
    kept edits, kept snippets, and whether anything was dropped.
    """
    if budget_chars is None:
        return list(edits), list(snippets), False
    fixed_size = sum(len(s) for s in fixed)
    kept_edits, kept_snippets = list(edits), list(snippets)

    def total() -> int:
        return fixed_size + sum(len(s) for s in kept_edits) + sum(len(s) for s in kept_snippets)

    truncated = False
    while kept_edits and total() > budget_chars:
        kept_edits.pop()
        truncated = True
    while kept_snippets and total() > budget_chars:
        kept_snippets.pop()
        truncated = True
    if total() > budget_chars:
        truncated = True
        log.warning("prompt exceeds budget even with all variable sections dropped")
    return kept_edits, kept_snippets, truncated

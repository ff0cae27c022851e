"""Embedding-indexed store of internal and external function snippets.

Internal snippets come from the project being optimized; external ones are
curated high-performance implementations. Retrieval is exact top-k cosine
over the stored embeddings with deterministic tie-breaking.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .model_gateway import Embedder

ORIGINS = ("internal", "external")
DEFAULT_K = 3


@dataclass(frozen=True)
class Snippet:
    id: str
    origin: str  # "internal" | "external"
    source_tag: str  # provenance label: project path or collection name
    body: str
    embedding: tuple[float, ...]

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")


@dataclass(frozen=True)
class RetrievalResult:
    entries: tuple[tuple[Snippet, float], ...]  # descending similarity

    def __len__(self) -> int:
        return len(self.entries)

    def bodies(self) -> list[str]:
        return [s.body for s, _ in self.entries]


class KnowledgeIndex:
    """In-memory snippet index; ingestion is writer-locked, reads are free."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder
        self._snippets: dict[str, Snippet] = {}
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._snippets)

    def stats(self) -> dict[str, int]:
        counts = {origin: 0 for origin in ORIGINS}
        for snip in self._snippets.values():
            counts[snip.origin] += 1
        return counts

    def ingest(self, corpus: Sequence[tuple[str, str]] | dict[str, str],
               origin: str, source_tag: str = "") -> dict[str, int]:
        """Embed and index (id, body) pairs; re-ingesting an id replaces it."""
        if origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")
        items = list(corpus.items()) if isinstance(corpus, dict) else list(corpus)
        if not items:
            return self.stats()
        vectors = self.embedder.embed([body for _, body in items])
        with self._write_lock:
            for (snip_id, body), vec in zip(items, vectors):
                self._snippets[snip_id] = Snippet(
                    id=snip_id, origin=origin,
                    source_tag=source_tag or origin,
                    body=body, embedding=tuple(vec),
                )
        return self.stats()

    def retrieve_similar(self, function_text: str, k: int = DEFAULT_K,
                         filter_origin: Optional[str] = None) -> RetrievalResult:
        """Top-k snippets by cosine similarity; ties broken by snippet id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        candidates = [
            s for s in self._snippets.values()
            if filter_origin is None or s.origin == filter_origin
        ]
        if not candidates:
            return RetrievalResult(entries=())
        query = np.asarray(self.embedder.embed([function_text])[0], dtype=float)
        qnorm = np.linalg.norm(query)
        scored = []
        for snip in candidates:
            vec = np.asarray(snip.embedding, dtype=float)
            norm = np.linalg.norm(vec)
            if qnorm == 0.0 or norm == 0.0:
                sim = 0.0
            else:
                sim = float(np.dot(query, vec) / (qnorm * norm))
            scored.append((snip, sim))
        scored.sort(key=lambda pair: (-pair[1], pair[0].id))
        return RetrievalResult(entries=tuple(scored[:k]))

    # --- persistence (JSON-lines: id, origin, source_tag, body, embedding) ---

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for snip_id in sorted(self._snippets):
                snip = self._snippets[snip_id]
                fh.write(json.dumps({
                    "id": snip.id,
                    "origin": snip.origin,
                    "source_tag": snip.source_tag,
                    "body": snip.body,
                    "embedding": list(snip.embedding),
                }, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str, embedder: Embedder) -> "KnowledgeIndex":
        index = cls(embedder)
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                snip = Snippet(
                    id=doc["id"], origin=doc["origin"],
                    source_tag=doc.get("source_tag", doc["origin"]),
                    body=doc["body"], embedding=tuple(doc["embedding"]),
                )
                index._snippets[snip.id] = snip
        return index


def load_bundled_external(index: KnowledgeIndex) -> dict[str, int]:
    """Ingest the small bundled sample of high-performance utility functions.

    Production deployments point configuration at their own curated
    collections; this sample only keeps offline runs meaningful.
    """
    raw = resources.files("optiweave.data").joinpath("external_snippets.jsonl").read_text("utf-8")
    items = []
    tag = "bundled-sample"
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        items.append((doc["id"], doc["body"]))
        tag = doc.get("source_tag", tag)
    return index.ingest(items, origin="external", source_tag=tag)

"""Relevance scoring and dependency-aware edit-sequence construction.

Combines a structural dependency score with semantic (embedding cosine)
similarity, filters weakly related functions, and orders the survivors
callees-first, then the target, then callers.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ModelFailureError, ScorerUnavailableError
from .model_gateway import ChatProvider, Embedder, ModelRequest
from .syntax_graph import CallGraph, Corpus, callees_of, callers_of

DEFAULT_THRESHOLD = 0.5
DEFAULT_WEIGHT = 0.5  # weight of the dependency component in the combined score


@dataclass(frozen=True)
class RelevanceScore:
    dependency: float
    semantic: float
    combined: float

    def __post_init__(self):
        for name in ("dependency", "semantic", "combined"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} score {v} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "dependency": self.dependency,
            "semantic": self.semantic,
            "combined": self.combined,
        }


@dataclass(frozen=True)
class SequenceEntry:
    function_id: str
    role: str  # "callee" | "target" | "caller"
    score: RelevanceScore


@dataclass(frozen=True)
class OptimizingFunctionSequence:
    entries: tuple[SequenceEntry, ...]

    def ids(self) -> tuple[str, ...]:
        return tuple(e.function_id for e in self.entries)

    def target_id(self) -> str:
        return next(e.function_id for e in self.entries if e.role == "target")

    def to_json(self) -> dict:
        return {
            "entries": [
                {"id": e.function_id, "role": e.role, "score": e.score.to_json()}
                for e in self.entries
            ]
        }


class DependencyScorer(Protocol):
    def score(self, a_id: Optional[str], a_text: str, b_id: Optional[str], b_text: str) -> float:
        ...


_IDENT_SKIP = frozenset(["self", "cls"])


def identifier_set(text: str) -> frozenset[str]:
    """Identifiers appearing in a code fragment (names, attributes, params).

    Falls back to a word regex when the fragment does not parse standalone.
    """
    try:
        tree = ast.parse(text)
    except SyntaxError:
        words = re.findall(r"[A-Za-z_][A-Za-z0-9_]*", text)
        return frozenset(w for w in words if w not in _IDENT_SKIP)
    names: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Name):
            names.add(node.id)
        elif isinstance(node, ast.Attribute):
            names.add(node.attr)
        elif isinstance(node, ast.arg):
            names.add(node.arg)
    return frozenset(n for n in names if n not in _IDENT_SKIP)


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


class DeterministicDependencyScorer:
    """Offline structural scorer: direct-edge indicator plus identifier overlap.

    score = 0.5 * [direct call edge between a and b] + 0.5 * Jaccard(identifiers)
    """

    def __init__(self, graph: Optional[CallGraph] = None):
        self._pairs: set[tuple[str, str]] = set()
        if graph is not None:
            for caller, callee, _ in graph.edges:
                self._pairs.add((caller, callee))

    def score(self, a_id, a_text, b_id, b_text) -> float:
        edge = 0.0
        if a_id and b_id and ((a_id, b_id) in self._pairs or (b_id, a_id) in self._pairs):
            edge = 1.0
        overlap = _jaccard(identifier_set(a_text), identifier_set(b_text))
        return min(1.0, max(0.0, 0.5 * edge + 0.5 * overlap))


class ScriptedScorer:
    """Canned pair scores for tests: keyed by (a_id, b_id), falling back to b_id."""

    def __init__(self, scores: dict):
        self._scores = dict(scores)
        self.default = 0.0

    def score(self, a_id, a_text, b_id, b_text) -> float:
        if (a_id, b_id) in self._scores:
            return float(self._scores[(a_id, b_id)])
        if b_id in self._scores:
            return float(self._scores[b_id])
        return self.default


class ModelDependencyScorer:
    """Production path: asks a chat provider to rate structural dependency."""

    PROMPT = (
        "Rate how strongly the implementation of the second function depends on "
        "or relates to the first, as a single number between 0 and 1. "
        "Respond with JSON: {\"score\": <number>}.\n\n"
        "First function:\n{a}\n\nSecond function:\n{b}\n"
    )

    def __init__(self, provider: ChatProvider):
        self.provider = provider

    def score(self, a_id, a_text, b_id, b_text) -> float:
        request = ModelRequest(
            messages=[{
                "role": "user",
                "content": self.PROMPT.replace("{a}", a_text).replace("{b}", b_text),
            }]
        )
        try:
            response = self.provider.complete(request)
            value = float(json.loads(response.content).get("score", 0.0))
        except ModelFailureError as err:
            raise ScorerUnavailableError(str(err)) from err
        except (json.JSONDecodeError, TypeError, ValueError) as err:
            raise ScorerUnavailableError(f"unparseable scorer output: {err}") from err
        return min(1.0, max(0.0, value))


def dependency_score(a_id: Optional[str], a_text: str, b_id: Optional[str], b_text: str,
                     scorer: DependencyScorer) -> float:
    return min(1.0, max(0.0, scorer.score(a_id, a_text, b_id, b_text)))


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    a, b = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def semantic_score(a_text: str, b_text: str, embedder: Embedder,
                   nonnegative_embeddings: bool = False) -> float:
    """Cosine similarity of embeddings, mapped into [0, 1].

    With embeddings that can be antipodal the cosine is mapped via (c+1)/2;
    embedders guaranteeing non-negative components report the raw cosine.
    """
    va, vb = embedder.embed([a_text, b_text])
    c = cosine(va, vb)
    if nonnegative_embeddings:
        return min(1.0, max(0.0, c))
    return min(1.0, max(0.0, (c + 1.0) / 2.0))


def combine(dep: float, sem: float, weight: float = DEFAULT_WEIGHT) -> float:
    """Weighted mean of the two components; the default is the plain average."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must be within [0, 1]")
    return weight * dep + (1.0 - weight) * sem


@dataclass
class RelevanceConfig:
    threshold: float = DEFAULT_THRESHOLD
    weight: float = DEFAULT_WEIGHT
    depth: Optional[int] = None  # None = unbounded transitive traversal
    nonnegative_embeddings: bool = False


class RelevanceScorer:
    """Facade bundling the dependency scorer and the semantic embedder.

    An optional fallback scorer covers SCORER_UNAVAILABLE from a model-backed
    primary; without one the error propagates.
    """

    def __init__(self, dep_scorer: DependencyScorer, embedder: Embedder,
                 config: Optional[RelevanceConfig] = None,
                 fallback_scorer: Optional[DependencyScorer] = None):
        self.dep_scorer = dep_scorer
        self.embedder = embedder
        self.config = config or RelevanceConfig()
        self.fallback_scorer = fallback_scorer

    def score_pair(self, a_id: Optional[str], a_text: str,
                   b_id: Optional[str], b_text: str) -> RelevanceScore:
        try:
            dep = dependency_score(a_id, a_text, b_id, b_text, self.dep_scorer)
        except ScorerUnavailableError:
            if self.fallback_scorer is None:
                raise
            dep = dependency_score(a_id, a_text, b_id, b_text, self.fallback_scorer)
        sem = semantic_score(a_text, b_text, self.embedder,
                             self.config.nonnegative_embeddings)
        return RelevanceScore(dep, sem, combine(dep, sem, self.config.weight))


class ScriptedRelevanceScorer(RelevanceScorer):
    """Injects scripted combined scores directly (both components set equal)."""

    def __init__(self, scores: dict, config: Optional[RelevanceConfig] = None):
        self._scores = dict(scores)
        self.config = config or RelevanceConfig()

    def score_pair(self, a_id, a_text, b_id, b_text) -> RelevanceScore:
        v = self._scores.get((a_id, b_id), self._scores.get(b_id, 0.0))
        v = float(v)
        return RelevanceScore(v, v, v)


_TARGET_SCORE = RelevanceScore(1.0, 1.0, 1.0)  # convention: the target always stays


def build_sequence(graph: CallGraph, corpus: Corpus, target_id: str,
                   scorer: RelevanceScorer,
                   threshold: float = DEFAULT_THRESHOLD,
                   depth: Optional[int] = None) -> OptimizingFunctionSequence:
    """Order the target's relevant callers/callees into an editing sequence.

    Callees precede the target, callers follow it; inside each block entries
    are sorted by descending combined score (ties broken by function id).
    Candidates scoring under the threshold are dropped; a function reachable
    both ways is treated as a callee (it is a dependency, so it edits first).
    """
    index = corpus.function_index()
    target = corpus.get_function(target_id)
    callee_ids = callees_of(graph, target_id, depth)
    caller_ids = callers_of(graph, target_id, depth)
    callee_ids.discard(target_id)
    caller_ids.discard(target_id)
    caller_ids -= callee_ids  # both-ways candidates count as callees

    def block(ids: set[str], role: str) -> list[SequenceEntry]:
        entries = []
        for fid in sorted(ids):
            fn = index.get(fid)
            if fn is None:
                continue
            score = scorer.score_pair(target_id, target.body, fid, fn.body)
            if score.combined >= threshold:
                entries.append(SequenceEntry(fid, role, score))
        entries.sort(key=lambda e: (-e.score.combined, e.function_id))
        return entries

    ordered = (
        block(callee_ids, "callee")
        + [SequenceEntry(target_id, "target", _TARGET_SCORE)]
        + block(caller_ids, "caller")
    )
    return OptimizingFunctionSequence(entries=tuple(ordered))

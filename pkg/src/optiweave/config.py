"""Declarative pipeline configuration with environment-variable interpolation.

One YAML document configures providers, scoring, agent caps, retrieval,
filters and measurement. Unknown keys are rejected so typos fail loudly, and
every constant the pipeline depends on (relevance threshold 0.5, agent cap
10, commit window 2000, size bounds 5/150/5 files) surfaces here with its
default.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import yaml

from .bench_builder import FilterConfig
from .edit_agent import AgentConfig
from .errors import ConfigInvalidError
from .knowledge_store import KnowledgeIndex, load_bundled_external
from .model_gateway import (
    ChatProvider,
    Embedder,
    HashingEmbedder,
    HttpChatProvider,
    HttpEmbedder,
    InteractionLog,
    ScriptedProvider,
)
from .probes import ProbeSelection
from .relevance import (
    DeterministicDependencyScorer,
    ModelDependencyScorer,
    RelevanceConfig,
    RelevanceScorer,
    ScriptedRelevanceScorer,
    ScriptedScorer,
)
from .syntax_graph import CallGraph

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value: Any) -> Any:
    if isinstance(value, str):
        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigInvalidError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


@dataclass
class ProviderSpec:
    kind: str = ""  # "scripted" | "http"
    script: str = ""  # path to a scripted transcript (scripted)
    responses: list = field(default_factory=list)  # inline script entries
    endpoint: str = ""
    model: str = ""
    api_key: str = ""
    temperature: float = 0.0
    retries: int = 3


@dataclass
class EmbedderSpec:
    kind: str = "hashing"  # "hashing" | "http"
    dim: int = 64
    seed: int = 0
    endpoint: str = ""
    model: str = ""
    api_key: str = ""


@dataclass
class ScorerSpec:
    kind: str = "deterministic"  # "deterministic" | "scripted" | "model"
    scores: dict = field(default_factory=dict)  # scripted: id or "a|b" -> value
    provider: ProviderSpec = field(default_factory=ProviderSpec)
    fallback_to_deterministic: bool = False  # cover SCORER_UNAVAILABLE offline


@dataclass
class RelevanceSettings:
    threshold: float = 0.5
    weight: float = 0.5
    depth: Optional[int] = None
    nonnegative_embeddings: bool = False
    scripted_combined: Optional[dict] = None  # id -> combined score, bypasses scoring


@dataclass
class RetrievalSettings:
    k: int = 3
    use_bundled_external: bool = True
    external_index: str = ""  # JSONL produced by `knowledge ingest`


@dataclass
class PipelineSettings:
    enable_vae: bool = True
    enable_retrieval: bool = True
    budget_chars: Optional[int] = None
    validation_gate: bool = True
    per_function_gate: bool = False


@dataclass
class EvalSettings:
    probe: str = "auto"  # "auto" | "command" | "stub"
    probe_executable: str = "instr-probe"
    backend: str = "trace"
    repeats: int = 1
    test_timeout: float = 60.0
    whole_process: bool = False
    stub_counts: dict = field(default_factory=dict)
    stub_default_count: int = 1000


@dataclass
class BenchSettings:
    keywords: list = field(default_factory=lambda: list(FilterConfig().keywords))
    min_lines: int = 5
    max_lines: int = 150
    max_files: int = 4
    commit_window: int = 2000
    tfidf_threshold: float = 0.0

    def to_filter_config(self) -> FilterConfig:
        return FilterConfig(
            keywords=tuple(self.keywords), min_lines=self.min_lines,
            max_lines=self.max_lines, max_files=self.max_files,
            commit_window=self.commit_window, tfidf_threshold=self.tfidf_threshold,
        )


@dataclass
class AgentSettings:
    max_iterations: int = 10
    fragments_per_call_cap: int = 10

    def to_agent_config(self) -> AgentConfig:
        return AgentConfig(max_iterations=self.max_iterations,
                           fragments_per_call_cap=self.fragments_per_call_cap)


@dataclass
class Config:
    providers: dict = field(default_factory=dict)  # role -> ProviderSpec
    embedder: EmbedderSpec = field(default_factory=EmbedderSpec)
    dependency_scorer: ScorerSpec = field(default_factory=ScorerSpec)
    relevance: RelevanceSettings = field(default_factory=RelevanceSettings)
    agent: AgentSettings = field(default_factory=AgentSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    interaction_log: str = ""

    PROVIDER_ROLES = ("agent", "editor", "optimizer", "confirmer")


def _build_dataclass(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigInvalidError(f"{where}: expected a mapping, got {type(doc).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigInvalidError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in doc:
            continue
        value = doc[f.name]
        if f.name == "provider" and isinstance(value, dict):
            value = _build_dataclass(ProviderSpec, value, f"{where}.provider")
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigInvalidError(f"{where}: {err}") from err


def load_config(path: Optional[str] = None) -> Config:
    """Load and validate a config document; None yields all defaults."""
    if path is None:
        return Config()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as err:
        raise ConfigInvalidError(f"cannot read config {path}: {err}") from err
    doc = _interpolate(doc)
    if not isinstance(doc, dict):
        raise ConfigInvalidError("config root must be a mapping")

    sections = {
        "embedder": EmbedderSpec,
        "dependency_scorer": ScorerSpec,
        "relevance": RelevanceSettings,
        "agent": AgentSettings,
        "retrieval": RetrievalSettings,
        "pipeline": PipelineSettings,
        "eval": EvalSettings,
        "bench": BenchSettings,
    }
    allowed = set(sections) | {"providers", "interaction_log"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigInvalidError(f"unknown top-level keys {sorted(unknown)}")

    config = Config()
    for key, cls in sections.items():
        if key in doc:
            setattr(config, key, _build_dataclass(cls, doc[key], key))
    providers = doc.get("providers", {})
    if not isinstance(providers, dict):
        raise ConfigInvalidError("providers must map role -> provider spec")
    for role, spec in providers.items():
        if role not in Config.PROVIDER_ROLES:
            raise ConfigInvalidError(
                f"unknown provider role {role!r}; expected one of {Config.PROVIDER_ROLES}"
            )
        config.providers[role] = _build_dataclass(ProviderSpec, spec, f"providers.{role}")
    config.interaction_log = doc.get("interaction_log", "") or ""
    return config


# --- wiring ----------------------------------------------------------------------

def build_chat_provider(spec: ProviderSpec, role: str,
                        log: Optional[InteractionLog] = None) -> ChatProvider:
    if spec.kind == "scripted":
        if spec.script:
            return ScriptedProvider.from_file(spec.script, retries=spec.retries,
                                              interaction_log=log)
        return ScriptedProvider(spec.responses, retries=spec.retries, interaction_log=log)
    if spec.kind == "http":
        if not spec.endpoint:
            raise ConfigInvalidError(f"providers.{role}: http provider needs an endpoint")
        return HttpChatProvider(
            endpoint=spec.endpoint, model=spec.model, api_key=spec.api_key,
            temperature=spec.temperature, retries=spec.retries, interaction_log=log,
        )
    raise ConfigInvalidError(
        f"providers.{role}: no provider configured (kind={spec.kind!r})"
    )


def require_provider(config: Config, role: str,
                     log: Optional[InteractionLog] = None) -> ChatProvider:
    spec = config.providers.get(role)
    if spec is None:
        raise ConfigInvalidError(f"no provider configured for role {role!r}")
    return build_chat_provider(spec, role, log)


def build_embedder(spec: EmbedderSpec) -> Embedder:
    if spec.kind == "hashing":
        return HashingEmbedder(dim=spec.dim, seed=spec.seed)
    if spec.kind == "http":
        if not spec.endpoint:
            raise ConfigInvalidError("embedder: http embedder needs an endpoint")
        return HttpEmbedder(endpoint=spec.endpoint, model=spec.model,
                            api_key=spec.api_key, dim=spec.dim)
    raise ConfigInvalidError(f"embedder: unknown kind {spec.kind!r}")


def build_relevance_scorer(config: Config, graph: Optional[CallGraph] = None,
                           log: Optional[InteractionLog] = None) -> RelevanceScorer:
    rel = config.relevance
    rc = RelevanceConfig(
        threshold=rel.threshold, weight=rel.weight, depth=rel.depth,
        nonnegative_embeddings=rel.nonnegative_embeddings,
    )
    if rel.scripted_combined:
        return ScriptedRelevanceScorer(dict(rel.scripted_combined), rc)
    spec = config.dependency_scorer
    if spec.kind == "deterministic":
        dep = DeterministicDependencyScorer(graph)
    elif spec.kind == "scripted":
        scores = {}
        for key, value in spec.scores.items():
            scores[tuple(key.split("|", 1)) if "|" in key else key] = value
        dep = ScriptedScorer(scores)
    elif spec.kind == "model":
        dep = ModelDependencyScorer(build_chat_provider(spec.provider, "dependency_scorer", log))
    else:
        raise ConfigInvalidError(f"dependency_scorer: unknown kind {spec.kind!r}")
    fallback = DeterministicDependencyScorer(graph) if spec.fallback_to_deterministic else None
    return RelevanceScorer(dep, build_embedder(config.embedder), rc,
                           fallback_scorer=fallback)


def build_knowledge_index(config: Config) -> KnowledgeIndex:
    embedder = build_embedder(config.embedder)
    if config.retrieval.external_index:
        index = KnowledgeIndex.load(config.retrieval.external_index, embedder)
    else:
        index = KnowledgeIndex(embedder)
        if config.retrieval.use_bundled_external:
            load_bundled_external(index)
    return index


def build_probe_selection(config: Config) -> ProbeSelection:
    ev = config.eval
    if ev.probe not in ("auto", "command", "stub"):
        raise ConfigInvalidError(f"eval.probe must be auto|command|stub, got {ev.probe!r}")
    return ProbeSelection(
        kind=ev.probe, executable=ev.probe_executable, backend=ev.backend,
        whole_process=ev.whole_process, stub_counts=dict(ev.stub_counts),
        stub_default_count=ev.stub_default_count,
    )

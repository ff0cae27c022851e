"""Iterative optimization editing over the ordered function sequence.

For each function: propose an initial edit guided by valid associated edits,
augment it with retrieved internal/external implementations, ask the
efficiency optimizer for the best version, integrate it against the project
context, apply it to the working corpus and append it to the shared history.
A failure at any stage degrades that function to a no-op; the run continues.
"""

from __future__ import annotations

import ast
import difflib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from .edit_agent import AgentConfig, AgentTranscript, ValidAssociatedEdits, identify_valid_edits
from .edit_history import EditRecord, rank_edits, truncate_for_prompt
from .errors import ModelFailureError, PatchApplyError, UnparseableCandidateError
from .knowledge_store import KnowledgeIndex, RetrievalResult
from .model_gateway import ChatProvider, ModelRequest, fit_to_budget
from .relevance import OptimizingFunctionSequence, RelevanceScorer
from .syntax_graph import (
    CallGraph,
    Corpus,
    FunctionRecord,
    build_call_graph,
    call_argument_counts,
    parse_unit,
)
from .edit_agent import load_template

log = logging.getLogger(__name__)

GENERIC_GOAL = ("Improve the execution efficiency of this function while "
                "preserving its behavior.")

STAGES = ("initial", "optimized", "integrated")


@dataclass(frozen=True)
class EditCandidate:
    function_id: str
    new_body: str
    stage: str  # "initial" | "optimized" | "integrated"
    provenance: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass(frozen=True)
class OptimizerPrompt:
    original: str
    alternatives: tuple[str, ...]  # the initial candidate plus retrieved bodies
    instruction: str


@dataclass(frozen=True)
class PatchEntry:
    function_id: str
    path: str
    old_body: str
    new_body: str

    @property
    def is_noop(self) -> bool:
        return self.old_body == self.new_body


@dataclass(frozen=True)
class ProjectPatch:
    base_revision: str
    entries: tuple[PatchEntry, ...]

    def to_json(self) -> dict:
        return {
            "base_revision": self.base_revision,
            "entries": [
                {
                    "function_id": e.function_id,
                    "path": e.path,
                    "old_body": e.old_body,
                    "new_body": e.new_body,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ProjectPatch":
        return cls(
            base_revision=doc["base_revision"],
            entries=tuple(
                PatchEntry(e["function_id"], e["path"], e["old_body"], e["new_body"])
                for e in doc["entries"]
            ),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ProjectPatch":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def render_patch_diff(corpus: Corpus, patch: ProjectPatch) -> str:
    """Unified-diff view of the patch against the given base corpus."""
    patched = apply_patch(corpus, patch)
    chunks = []
    for path in sorted(corpus.units):
        before = corpus.units[path].content
        after = patched.units[path].content if path in patched.units else before
        if before == after:
            continue
        diff = difflib.unified_diff(
            before.splitlines(keepends=True), after.splitlines(keepends=True),
            fromfile=f"a/{path}", tofile=f"b/{path}",
        )
        chunks.append("".join(diff))
    return "".join(chunks)


def _copy_corpus(corpus: Corpus) -> Corpus:
    clone = Corpus(warnings=list(corpus.warnings))
    for path, unit in corpus.units.items():
        clone.add(parse_unit(path, unit.content))
    return clone


def _replace_function(corpus: Corpus, function_id: str, new_body: str) -> None:
    """Swap one function body in place and reparse the touched unit."""
    fn = corpus.get_function(function_id)
    unit = corpus.units[fn.path]
    content_bytes = unit.content.encode("utf-8")
    updated = (
        content_bytes[: fn.span[0]] + new_body.encode("utf-8") + content_bytes[fn.span[1]:]
    )
    reparsed = parse_unit(fn.path, updated.decode("utf-8"))
    if reparsed.diagnostics:
        raise PatchApplyError(
            f"replacing {function_id} breaks {fn.path}: {reparsed.diagnostics[0]}"
        )
    corpus.add(reparsed)


def apply_patch(corpus: Corpus, patch: ProjectPatch) -> Corpus:
    """Apply entries in order to a copy of the corpus.

    Re-applying is detected per entry: a function already carrying the new
    body is skipped, anything else is a hard mismatch.
    """
    work = _copy_corpus(corpus)
    for entry in patch.entries:
        if entry.is_noop:
            continue
        current = work.get_function(entry.function_id)
        if current.body == entry.new_body:
            continue  # already applied
        if current.body != entry.old_body:
            raise PatchApplyError(
                f"{entry.function_id}: current body matches neither side of the patch"
            )
        _replace_function(work, entry.function_id, entry.new_body)
    return work


# --- candidate parsing and checks ----------------------------------------------

_FENCE_RE = re.compile(r"```(?:python)?\s*\n(.*?)```", re.DOTALL)


def extract_code(text: str) -> str:
    match = _FENCE_RE.search(text)
    return (match.group(1) if match else text).strip("\n").rstrip()


def _candidate_issues(code: str, expected_name: str, expected_arity: int) -> list[str]:
    issues: list[str] = []
    try:
        tree = ast.parse(code)
    except SyntaxError as err:
        return [f"does not parse: {err.msg}"]
    defs = [n for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))]
    if len(tree.body) != 1 or len(defs) != 1:
        return ["must be exactly one function definition"]
    node = defs[0]
    if node.name != expected_name:
        issues.append(f"function renamed to {node.name!r}, expected {expected_name!r}")
    arity = len(node.args.posonlyargs) + len(node.args.args) + len(node.args.kwonlyargs)
    if node.args.vararg:
        arity += 1
    if node.args.kwarg:
        arity += 1
    if arity != expected_arity:
        issues.append(f"parameter count changed from {expected_arity} to {arity}")
    return issues


def _positional_bounds(code: str) -> tuple[int, float]:
    """(required positional count, max positional count) of a function body."""
    node = ast.parse(code).body[0]
    positional = node.args.posonlyargs + node.args.args
    required = len(positional) - len(node.args.defaults)
    maximum: float = float(len(positional))
    if node.args.vararg:
        maximum = float("inf")
    return required, maximum


def normalized(code: str) -> str:
    return "".join(code.split())


# --- pipeline operations ---------------------------------------------------------

def generate_initial_edit(fn: FunctionRecord, valid_edits: ValidAssociatedEdits,
                          task_prompt: Optional[str], model: ChatProvider,
                          budget_chars: Optional[int] = None) -> EditCandidate:
    """First optimization attempt, guided by the selected associated edits."""
    goal = task_prompt or GENERIC_GOAL
    rendered_edits = [truncate_for_prompt(e) for e in valid_edits.edits]
    template = load_template("initial_edit.txt")
    fixed = template.replace("{goal}", goal).replace("{function}", fn.body)
    kept, _, _ = fit_to_budget([fixed], rendered_edits, [], budget_chars)
    if kept:
        section = "\nRelevant historical edits from this project:\n" + "\n\n".join(kept) + "\n"
    else:
        section = ""
    prompt = fixed.replace("{edits_section}", section)

    expected_arity = len(fn.signature)
    attempt_feedback = ""
    for _ in range(2):
        response = model.complete(ModelRequest(
            messages=[{"role": "user", "content": prompt + attempt_feedback}],
        ))
        code = extract_code(response.content)
        issues = _candidate_issues(code, fn.name, expected_arity)
        if not issues:
            return EditCandidate(function_id=fn.id, new_body=code, stage="initial",
                                 provenance="initial-edit model")
        attempt_feedback = (
            "\n\nYour previous reply was rejected: " + "; ".join(issues)
            + ". Reply with exactly one complete function definition."
        )
    raise UnparseableCandidateError(f"{fn.id}: {'; '.join(issues)}")


def augment(candidate: EditCandidate, internal: RetrievalResult,
            external: RetrievalResult) -> OptimizerPrompt:
    """Assemble the optimizer prompt: initial edit first, then internal, then
    external snippets, deduplicated by whitespace-normalized text."""
    if candidate.stage != "initial":
        raise ValueError("augment expects an initial-stage candidate")
    alternatives: list[str] = [candidate.new_body]
    seen = {normalized(candidate.new_body)}
    for result in (internal, external):
        for snippet, _ in result.entries:
            key = normalized(snippet.body)
            if key not in seen:
                seen.add(key)
                alternatives.append(snippet.body)
    return OptimizerPrompt(
        original=candidate.new_body,
        alternatives=tuple(alternatives),
        instruction=load_template("optimizer_instruction.txt"),
    )


def propose_optimized(prompt: OptimizerPrompt, optimizer_model: ChatProvider,
                      function_id: str = "", budget_chars: Optional[int] = None) -> EditCandidate:
    """Ask the efficiency optimizer for the best version among the alternatives.

    Any model failure (including unparseable output) falls back to the
    initial candidate so the pipeline can keep going.
    """
    rendered = [
        f"# candidate {idx + 1}\n```python\n{alt}\n```"
        for idx, alt in enumerate(prompt.alternatives)
    ]
    _, kept, _ = fit_to_budget([prompt.instruction], [], rendered, budget_chars)
    text = prompt.instruction + "\n\n" + "\n\n".join(kept or rendered[:1])
    try:
        response = optimizer_model.complete(ModelRequest(
            messages=[{"role": "user", "content": text}],
        ))
        code = extract_code(response.content)
        ast.parse(code)
    except (ModelFailureError, SyntaxError) as err:
        log.warning("optimizer degraded to the initial candidate for %s: %s", function_id, err)
        return EditCandidate(function_id=function_id, new_body=prompt.alternatives[0],
                             stage="optimized", provenance="fallback: initial candidate")
    provenance = "optimizer model"
    key = normalized(code)
    for idx, alt in enumerate(prompt.alternatives):
        if normalized(alt) == key:
            provenance = f"optimizer model (selected alternative {idx + 1} verbatim)"
            break
    return EditCandidate(function_id=function_id, new_body=code,
                         stage="optimized", provenance=provenance)


def integrate(fn: FunctionRecord, optimized: EditCandidate, corpus: Corpus,
              graph: CallGraph, model: ChatProvider,
              context_chars: int = 4000) -> EditCandidate:
    """Contextual integration with caller-compatibility enforcement.

    The integrated body must keep the function's public name and stay arity
    compatible with every recorded call site; after one failed reprompt the
    function degrades to its original body.
    """
    context_parts = []
    index = corpus.function_index()
    neighbor_ids = sorted(
        {caller for caller, callee, _ in graph.edges if callee == fn.id}
        | {callee for caller, callee, _ in graph.edges if caller == fn.id}
    )
    for nid in neighbor_ids:
        rec = index.get(nid)
        if rec is not None:
            context_parts.append(f"# {nid}\n{rec.body}")
    context = "\n\n".join(context_parts)[:context_chars] or "(no recorded callers or callees)"

    template = load_template("integrate.txt")
    prompt = (
        template.replace("{name}", fn.name)
        .replace("{original}", fn.body)
        .replace("{proposal}", optimized.new_body)
        .replace("{context}", context)
    )
    site_counts = call_argument_counts(corpus, graph, fn.id)

    def check(code: str) -> list[str]:
        issues = _candidate_issues(code, fn.name, len(fn.signature))
        issues = [i for i in issues if "parameter count" not in i]  # arity via call sites
        if issues:
            return issues
        required, maximum = _positional_bounds(code)
        bad = [c for c in site_counts if not required <= c <= maximum]
        if bad:
            issues.append(
                f"call sites pass {sorted(set(bad))} positional args, "
                f"signature accepts [{required}, {maximum}]"
            )
        return issues

    attempt_feedback = ""
    for _ in range(2):
        try:
            response = model.complete(ModelRequest(
                messages=[{"role": "user", "content": prompt + attempt_feedback}],
            ))
        except ModelFailureError as err:
            log.warning("integration degraded to the original body for %s: %s", fn.id, err)
            return EditCandidate(function_id=fn.id, new_body=fn.body, stage="integrated",
                                 provenance="fallback: original body")
        code = extract_code(response.content)
        issues = check(code)
        if not issues:
            return EditCandidate(function_id=fn.id, new_body=code, stage="integrated",
                                 provenance="integration model")
        attempt_feedback = (
            "\n\nYour previous reply was rejected: " + "; ".join(issues)
            + ". Keep the public name and the caller-visible signature."
        )
    log.warning("integration degraded to the original body for %s: %s", fn.id, issues)
    return EditCandidate(function_id=fn.id, new_body=fn.body, stage="integrated",
                         provenance="fallback: original body (integration rejected)")


def append_history(history: list[EditRecord], function_id: str, path: str,
                   before: str, after: str) -> list[EditRecord]:
    """History plus the integrated edit; no-ops and duplicates are rejected."""
    if before == after:
        return list(history)
    record = EditRecord(
        origin=f"pipeline:{function_id}", path=path, function_id=function_id,
        before=before, after=after, message="efficiency optimization edit",
    )
    for existing in history:
        if (existing.function_id, existing.before, existing.after) == (
            function_id, before, after,
        ):
            return list(history)
    return [*history, record]


# --- sequence driver ---------------------------------------------------------------


@dataclass
class OptimizationTask:
    corpus: Corpus
    target_id: str
    task_prompt: Optional[str] = None
    history: list[EditRecord] = field(default_factory=list)
    base_revision: str = "worktree"


@dataclass
class PipelineProviders:
    edit_model: ChatProvider  # initial edit + integration
    optimizer_model: ChatProvider
    agent_model: ChatProvider
    scorer: RelevanceScorer
    knowledge: Optional[KnowledgeIndex] = None


@dataclass
class PipelineConfig:
    enable_vae: bool = True  # False reproduces the no-associated-edits ablation
    enable_retrieval: bool = True  # False reproduces the no-augmentation ablation
    retrieval_k: int = 3
    agent: AgentConfig = field(default_factory=AgentConfig)
    budget_chars: Optional[int] = None
    per_function_gate: Optional[Callable[[Corpus], bool]] = None  # opt-in fast gate


@dataclass
class RunReport:
    functions: list[dict] = field(default_factory=list)
    transcripts: dict[str, AgentTranscript] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "functions": self.functions,
            "transcripts": {k: v.to_json() for k, v in self.transcripts.items()},
        }


def _retrieve(knowledge: Optional[KnowledgeIndex], text: str, k: int,
              origin: str, exclude_id: str) -> RetrievalResult:
    if knowledge is None or len(knowledge) == 0:
        return RetrievalResult(entries=())
    raw = knowledge.retrieve_similar(text, k + 1, filter_origin=origin)
    kept = tuple(
        (snip, sim) for snip, sim in raw.entries if snip.id != exclude_id
    )[:k]
    return RetrievalResult(entries=kept)


def run_sequence(task: OptimizationTask, sequence: OptimizingFunctionSequence,
                 providers: PipelineProviders,
                 config: Optional[PipelineConfig] = None) -> tuple[ProjectPatch, RunReport]:
    """Process the sequence in order, applying each integrated edit before the
    next function is considered. Failed functions degrade to no-ops."""
    config = config or PipelineConfig()
    corpus = _copy_corpus(task.corpus)
    history = list(task.history)
    report = RunReport()
    entries: list[PatchEntry] = []

    if providers.knowledge is not None and config.enable_retrieval:
        internal_corpus = [(fn.id, fn.body) for fn in corpus.functions()]
        providers.knowledge.ingest(internal_corpus, origin="internal", source_tag="project")

    for seq_entry in sequence.entries:
        fid = seq_entry.function_id
        fn = corpus.get_function(fid)
        old_body = fn.body
        info: dict = {"function_id": fid, "role": seq_entry.role, "degradations": []}
        graph = build_call_graph(corpus.units.values())

        # Phase II: valid associated edits against the current history
        valid = ValidAssociatedEdits(edits=(), rationales=())
        if config.enable_vae and history:
            ranked = rank_edits(fn, history, providers.scorer)
            valid, transcript = identify_valid_edits(fn, ranked, providers.agent_model,
                                                     config.agent)
            report.transcripts[fid] = transcript
            if transcript.aborted:
                info["degradations"].append(f"agent: {transcript.aborted}")
        info["valid_edit_count"] = len(valid.edits)

        try:
            initial = generate_initial_edit(fn, valid, task.task_prompt,
                                            providers.edit_model, config.budget_chars)
        except (ModelFailureError, UnparseableCandidateError) as err:
            info["degradations"].append(f"initial edit failed: {err.code}")
            info["outcome"] = "noop"
            entries.append(PatchEntry(fid, fn.path, old_body, old_body))
            report.functions.append(info)
            continue

        if config.enable_retrieval:
            internal = _retrieve(providers.knowledge, fn.body, config.retrieval_k,
                                 "internal", fid)
            external = _retrieve(providers.knowledge, fn.body, config.retrieval_k,
                                 "external", fid)
            prompt = augment(initial, internal, external)
            info["alternatives"] = len(prompt.alternatives)
            optimized = propose_optimized(prompt, providers.optimizer_model, fid,
                                          config.budget_chars)
        else:
            optimized = EditCandidate(function_id=fid, new_body=initial.new_body,
                                      stage="optimized", provenance="initial (retrieval off)")
            info["alternatives"] = 1
        info["optimizer_provenance"] = optimized.provenance

        integrated = integrate(fn, optimized, corpus, graph, providers.edit_model)
        info["integration_provenance"] = integrated.provenance

        if integrated.new_body != old_body:
            try:
                _replace_function(corpus, fid, integrated.new_body)
            except PatchApplyError as err:
                info["degradations"].append(f"apply failed: {err.message}")
                info["outcome"] = "noop"
                entries.append(PatchEntry(fid, fn.path, old_body, old_body))
                report.functions.append(info)
                continue
            # store the reparsed body so patch entries match corpus state exactly
            applied_body = corpus.get_function(fid).body
            entries.append(PatchEntry(fid, fn.path, old_body, applied_body))
            if providers.knowledge is not None and config.enable_retrieval:
                providers.knowledge.ingest([(fid, applied_body)],
                                           origin="internal", source_tag="project")
            history = append_history(history, fid, fn.path, old_body, applied_body)
            info["outcome"] = "edited" if applied_body != old_body else "noop"
        else:
            entries.append(PatchEntry(fid, fn.path, old_body, old_body))
            info["outcome"] = "noop"
        if config.per_function_gate is not None and not config.per_function_gate(corpus):
            info["degradations"].append("per-function gate failed; edit reverted")
            _replace_function(corpus, fid, old_body)
            entries[-1] = PatchEntry(fid, fn.path, old_body, old_body)
            info["outcome"] = "noop"
        report.functions.append(info)

    patch = ProjectPatch(base_revision=task.base_revision, entries=tuple(entries))
    return patch, report

"""Build self-contained optimization task bundles from a repository's history.

Pipeline: keyword coarse filter over commit messages (stemmed, IDF-weighted),
line/file size fine filter, model-backed semantic confirmation, test-case
extraction, bundle emission. Each emitted bundle carries the five task
components: target function, optional task prompt, edit history, executable
project snapshot with environment manifest, and test cases.
"""

from __future__ import annotations

import difflib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

import jsonschema

from .edit_history import (
    CommitRecord,
    EditRecord,
    extract_edits,
    load_edit_log,
    mine_commits,
    save_edit_log,
    snapshot_pair,
)
from .errors import ModelFailureError, NoTestsError, SchemaViolationError
from .model_gateway import ChatProvider, ModelRequest
from .syntax_graph import (
    CallGraph,
    Corpus,
    build_call_graph,
    callees_of,
    load_corpus_from_dir,
)
from .edit_agent import load_template

log = logging.getLogger(__name__)

# Documented superset seeded from the canonical four efficiency terms.
DEFAULT_KEYWORDS = (
    "optimize", "latency", "efficiency", "fast",
    "speed", "speedup", "performance", "perf", "accelerate",
    "slow", "throughput", "cache", "bottleneck", "quick",
)


@dataclass
class FilterConfig:
    keywords: tuple[str, ...] = DEFAULT_KEYWORDS
    min_lines: int = 5
    max_lines: int = 150
    max_files: int = 4  # five or more files excluded
    commit_window: int = 2000
    tfidf_threshold: float = 0.0  # any keyword hit passes by default

    def __post_init__(self):
        if self.min_lines > self.max_lines:
            raise ValueError("min_lines must be <= max_lines")
        if min(self.min_lines, self.max_lines, self.max_files, self.commit_window) <= 0:
            raise ValueError("all filter bounds must be positive")
        if not self.keywords:
            raise ValueError("keyword list must be nonempty")


# --- stemming and keyword filter --------------------------------------------------

_SUFFIXES = (
    "encies", "ation", "ingly",
    "ency", "ance", "ence", "ment", "ant", "ent",
    "est", "ing", "ies", "ed", "er", "es", "ly", "s", "e", "y",
)
_WORD_RE = re.compile(r"[A-Za-z]+")


def stem(word: str) -> str:
    """Light iterative suffix stripper; stems never go below three characters."""
    w = word.lower()
    changed = True
    while changed:
        changed = False
        for suffix in _SUFFIXES:
            if w.endswith(suffix) and len(w) - len(suffix) >= 3:
                w = w[: -len(suffix)]
                changed = True
                break
    return w


def message_stems(message: str) -> list[str]:
    return [stem(w) for w in _WORD_RE.findall(message)]


def keyword_filter(commits: Iterable[CommitRecord],
                   config: Optional[FilterConfig] = None) -> list[CommitRecord]:
    """Keep commits whose message hits an efficiency keyword stem.

    Term hits are TF-IDF weighted over the mined message corpus so ubiquitous
    terms count less; with the default threshold any hit passes.
    """
    config = config or FilterConfig()
    commits = list(commits)
    keyword_stems = {stem(k) for k in config.keywords}
    per_commit = [message_stems(c.message) for c in commits]

    df: dict[str, int] = {}
    for stems in per_commit:
        for s in set(stems):
            df[s] = df.get(s, 0) + 1
    n = len(commits)

    kept = []
    for commit, stems in zip(commits, per_commit):
        hits = [s for s in stems if s in keyword_stems]
        if not hits:
            continue
        score = 0.0
        for s in set(hits):
            tf = hits.count(s)
            idf = math.log((1 + n) / (1 + df.get(s, 0))) + 1.0
            score += tf * idf
        if score >= config.tfidf_threshold:
            kept.append(commit)
    return kept


def size_filter(commits: Iterable[CommitRecord],
                config: Optional[FilterConfig] = None) -> list[CommitRecord]:
    """Keep commits with min_lines <= changed lines <= max_lines and at most
    max_files touched files."""
    config = config or FilterConfig()
    return [
        c for c in commits
        if config.min_lines <= c.lines_changed <= config.max_lines
        and c.files_changed <= config.max_files
    ]


# --- semantic confirmation ----------------------------------------------------------

@dataclass(frozen=True)
class ConfirmVerdict:
    sha: str
    verdict: str  # "relevant" | "irrelevant"
    score: float
    rationale: str


def semantic_confirm(commit: CommitRecord, model: ChatProvider,
                     audit: Optional[list[dict]] = None) -> ConfirmVerdict:
    """Ask the model whether the commit targets execution speed specifically."""
    diff_text = "\n".join(
        f"--- {d.old_path}\n+++ {d.new_path}\n"
        + "\n".join(l for h in d.hunks for l in h.lines)
        for d in commit.diffs
    )[:6000]
    prompt = (
        load_template("semantic_confirm.txt")
        .replace("{message}", commit.message)
        .replace("{diff}", diff_text)
    )
    response = model.complete(ModelRequest(messages=[{"role": "user", "content": prompt}]))
    try:
        doc = json.loads(re.search(r"\{.*\}", response.content, re.DOTALL).group(0))
        verdict = str(doc.get("verdict", "irrelevant")).lower()
        if verdict not in ("relevant", "irrelevant"):
            verdict = "irrelevant"
        result = ConfirmVerdict(
            sha=commit.sha, verdict=verdict,
            score=float(doc.get("score", 0.0)),
            rationale=str(doc.get("rationale", "")),
        )
    except (AttributeError, json.JSONDecodeError, TypeError, ValueError) as err:
        raise ModelFailureError(f"unparseable confirmation verdict: {err}") from err
    if audit is not None:
        audit.append({
            "sha": commit.sha, "prompt": prompt,
            "response": response.content,
            "verdict": result.verdict, "score": result.score,
        })
    return result


# --- test extraction -----------------------------------------------------------------

def _is_test_path(path: str) -> bool:
    base = os.path.basename(path)
    parts = path.replace("\\", "/").split("/")
    return (
        base.startswith("test_") or base.endswith("_test.py")
        or any(p in ("tests", "test") for p in parts[:-1])
    )


def _test_node_id(function_id: str, path: str) -> str:
    module = path[:-3].replace("\\", "/").strip("/").replace("/", ".")
    scope = function_id[len(module) + 1:] if function_id.startswith(module + ".") else function_id
    return f"{path}::{scope.replace('.', '::')}"


def extract_test_cases(commit: CommitRecord, corpus_after: Corpus, target_id: str,
                       graph: Optional[CallGraph] = None) -> list[str]:
    """Tests touched by the commit first, then tests reaching the target.

    Raises NO_TESTS when neither source yields anything: such candidates
    cannot be evaluated and are rejected.
    """
    if graph is None:
        graph = build_call_graph(corpus_after.units.values())
    edits = extract_edits(commit, Corpus(), corpus_after)
    index = corpus_after.function_index()

    patch_tests: list[str] = []
    for edit in edits:
        if edit.function_id is None or not _is_test_path(edit.path):
            continue
        fn = index.get(edit.function_id)
        if fn is not None and fn.name.startswith("test"):
            node = _test_node_id(fn.id, fn.path)
            if node not in patch_tests:
                patch_tests.append(node)

    reaching_tests: list[str] = []
    for fn in corpus_after.functions():
        if not (_is_test_path(fn.path) and fn.name.startswith("test")):
            continue
        if fn.id not in graph.nodes:
            continue
        if target_id in callees_of(graph, fn.id, None):
            node = _test_node_id(fn.id, fn.path)
            if node not in patch_tests and node not in reaching_tests:
                reaching_tests.append(node)

    tests = patch_tests + sorted(reaching_tests)
    if not tests:
        raise NoTestsError(f"no test cases cover {target_id} for commit {commit.sha[:12]}")
    return tests


# --- target selection ----------------------------------------------------------------

def pick_target_function(commit: CommitRecord, edits: list[EditRecord],
                         override: Optional[str] = None) -> Optional[str]:
    """Most-edited non-test function; ties break on message-term overlap, then id."""
    if override:
        return override
    candidates: dict[str, int] = {}
    for edit in edits:
        if edit.function_id is None or _is_test_path(edit.path):
            continue
        delta = sum(
            1 for line in difflib.ndiff(edit.before.splitlines(), edit.after.splitlines())
            if line.startswith(("+ ", "- "))
        )
        candidates[edit.function_id] = candidates.get(edit.function_id, 0) + delta
    if not candidates:
        return None
    msg_stems = set(message_stems(commit.message))

    def overlap(fid: str) -> int:
        parts = {stem(w) for w in re.findall(r"[A-Za-z]+", fid)}
        return len(parts & msg_stems)

    return max(candidates, key=lambda fid: (candidates[fid], overlap(fid), fid))


# --- bundle schema and emission --------------------------------------------------------

BUNDLE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "task_id", "target_function", "task_prompt",
                 "history", "project", "tests", "ground_truth"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "task_id": {"type": "string", "minLength": 1},
        "target_function": {
            "type": "object",
            "required": ["id", "body", "path"],
            "additionalProperties": False,
            "properties": {
                "id": {"type": "string", "minLength": 1},
                "body": {"type": "string", "minLength": 1},
                "path": {"type": "string", "minLength": 1},
            },
        },
        "task_prompt": {"type": ["string", "null"]},
        "history": {"type": "string", "minLength": 1},
        "project": {
            "type": "object",
            "required": ["revision", "root", "environment"],
            "additionalProperties": False,
            "properties": {
                "revision": {"type": "string", "minLength": 1},
                "root": {"type": "string", "minLength": 1},
                "environment": {"type": "string", "minLength": 1},
            },
        },
        "tests": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "ground_truth": {
            "type": "object",
            "required": ["diff", "bodies"],
            "additionalProperties": False,
            "properties": {
                "diff": {"type": "string"},
                "bodies": {"type": "object", "additionalProperties": {"type": "string"}},
            },
        },
    },
}


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@dataclass
class TaskBundle:
    directory: str
    manifest: dict

    @property
    def task_id(self) -> str:
        return self.manifest["task_id"]

    @property
    def target_id(self) -> str:
        return self.manifest["target_function"]["id"]

    @property
    def task_prompt(self) -> Optional[str]:
        return self.manifest["task_prompt"]

    @property
    def tests(self) -> list[str]:
        return list(self.manifest["tests"])

    @property
    def project_root(self) -> str:
        return os.path.join(self.directory, self.manifest["project"]["root"])

    def corpus(self) -> Corpus:
        return load_corpus_from_dir(self.project_root)

    def history(self) -> list[EditRecord]:
        path = os.path.join(self.directory, self.manifest["history"])
        if not os.path.exists(path):
            return []
        return load_edit_log(path)

    def environment(self) -> dict:
        with open(os.path.join(self.directory, self.manifest["project"]["environment"]),
                  "r", encoding="utf-8") as fh:
            return json.load(fh)

    def ground_truth_bodies(self) -> dict[str, str]:
        return dict(self.manifest["ground_truth"]["bodies"])

    @classmethod
    def load(cls, directory: str) -> "TaskBundle":
        manifest_path = os.path.join(directory, "manifest.json")
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise SchemaViolationError(f"unreadable bundle manifest: {err}") from err
        validate_manifest(manifest)
        return cls(directory=directory, manifest=manifest)

    def save(self) -> None:
        validate_manifest(self.manifest)
        with open(os.path.join(self.directory, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(self.manifest))


def validate_manifest(manifest: dict) -> None:
    try:
        jsonschema.validate(manifest, BUNDLE_SCHEMA)
    except jsonschema.ValidationError as err:
        raise SchemaViolationError(f"bundle manifest invalid: {err.message}") from err


@dataclass
class BundleSelections:
    target_id: str
    tests: list[str]
    task_prompt: Optional[str]
    history: list[EditRecord]
    corpus_before: Corpus
    ground_truth_bodies: dict[str, str]
    test_overlay: dict[str, str] = field(default_factory=dict)  # post-commit test files
    environment: dict = field(default_factory=lambda: {"kind": "local"})
    revision: str = ""


def emit_task_bundle(commit: CommitRecord, selections: BundleSelections,
                     out_dir: str) -> TaskBundle:
    """Write a validated bundle directory for one commit."""
    corpus = selections.corpus_before
    try:
        target = corpus.get_function(selections.target_id)
    except Exception as err:
        raise SchemaViolationError(f"target function unavailable: {err}") from err
    for fid in selections.ground_truth_bodies:
        corpus.get_function(fid)  # ground truth must apply to this revision

    os.makedirs(os.path.join(out_dir, "project"), exist_ok=True)
    for path in sorted(corpus.units):
        full = os.path.join(out_dir, "project", path)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        with open(full, "w", encoding="utf-8") as fh:
            fh.write(corpus.units[path].content)
    for path, content in sorted(selections.test_overlay.items()):
        full = os.path.join(out_dir, "project", path)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        with open(full, "w", encoding="utf-8") as fh:
            fh.write(content)

    save_edit_log(selections.history, os.path.join(out_dir, "history.jsonl"))
    with open(os.path.join(out_dir, "environment.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(selections.environment))

    gt_diff = _ground_truth_diff(corpus, selections.ground_truth_bodies)
    with open(os.path.join(out_dir, "ground_truth.diff"), "w", encoding="utf-8") as fh:
        fh.write(gt_diff)

    manifest = {
        "schema_version": 1,
        "task_id": f"task-{commit.sha[:12]}",
        "target_function": {"id": target.id, "body": target.body, "path": target.path},
        "task_prompt": selections.task_prompt,
        "history": "history.jsonl",
        "project": {
            "revision": selections.revision or f"{commit.sha}^",
            "root": "project",
            "environment": "environment.json",
        },
        "tests": list(selections.tests),
        "ground_truth": {
            "diff": "ground_truth.diff",
            "bodies": dict(selections.ground_truth_bodies),
        },
    }
    validate_manifest(manifest)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(manifest))
    return TaskBundle(directory=out_dir, manifest=manifest)


def _ground_truth_diff(corpus: Corpus, bodies: dict[str, str]) -> str:
    from .optimize_pipeline import PatchEntry, ProjectPatch, render_patch_diff

    entries = []
    index = corpus.function_index()
    for fid in sorted(bodies):
        fn = index[fid]
        entries.append(PatchEntry(fid, fn.path, fn.body, bodies[fid]))
    patch = ProjectPatch(base_revision="bundle", entries=tuple(entries))
    return render_patch_diff(corpus, patch)


# --- end-to-end builder -----------------------------------------------------------------

@dataclass
class BuildReport:
    mined: int = 0
    after_keyword: int = 0
    after_size: int = 0
    after_semantic: int = 0
    emitted: list[str] = field(default_factory=list)
    rejected_no_tests: list[str] = field(default_factory=list)
    needs_review: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return self.__dict__.copy()


def build_tasks(repo: str, out_root: str, model: ChatProvider,
                config: Optional[FilterConfig] = None,
                revision_range: Optional[str] = None) -> BuildReport:
    """Run the full filter chain over a repository and emit task bundles."""
    config = config or FilterConfig()
    report = BuildReport()
    commits = mine_commits(repo, revision_range, config.commit_window)
    report.mined = len(commits)
    commits = keyword_filter(commits, config)
    report.after_keyword = len(commits)
    commits = size_filter(commits, config)
    report.after_size = len(commits)

    confirmed = []
    for commit in commits:
        try:
            verdict = semantic_confirm(commit, model)
        except ModelFailureError:
            report.needs_review.append(commit.sha)
            continue
        if verdict.verdict == "relevant":
            confirmed.append(commit)
    report.after_semantic = len(confirmed)

    for commit in confirmed:
        before, after = snapshot_pair(repo, commit.sha)
        edits = extract_edits(commit, before, after)
        target_id = pick_target_function(commit, edits)
        if target_id is None:
            continue
        try:
            tests = extract_test_cases(commit, after, target_id)
        except NoTestsError:
            report.rejected_no_tests.append(commit.sha)
            continue
        gt_bodies = {
            e.function_id: e.after
            for e in edits
            if e.function_id and e.after and not _is_test_path(e.path)
        }
        overlay = {
            unit.path: unit.content
            for unit in after.units.values()
            if _is_test_path(unit.path)
        }
        history = [e for c in mine_commits(repo, f"{commit.sha}^", config.commit_window)
                   for e in extract_edits(c, *snapshot_pair(repo, c.sha))]
        msg = commit.message.strip()
        selections = BundleSelections(
            target_id=target_id,
            tests=tests,
            task_prompt=msg.splitlines()[0] if msg else None,
            history=history,
            corpus_before=before,
            ground_truth_bodies=gt_bodies,
            test_overlay=overlay,
            revision=f"{commit.sha}^",
        )
        out_dir = os.path.join(out_root, f"task-{commit.sha[:12]}")
        try:
            emit_task_bundle(commit, selections, out_dir)
        except SchemaViolationError as err:
            log.warning("skipping commit %s: %s", commit.sha[:12], err.message)
            continue
        report.emitted.append(out_dir)
    return report

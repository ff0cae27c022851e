"""Mine git history into function-level edit records and rank them.

Commits are read newest-first through the git CLI; each changed hunk is
attributed to its enclosing function using the after-side snapshot (before-side
for pure deletions). Ranking reuses the relevance machinery.
"""

from __future__ import annotations

import json
import logging
import re
import subprocess
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import NotARepoError, RevisionNotFoundError
from .relevance import RelevanceScore, RelevanceScorer
from .syntax_graph import Corpus, FunctionRecord, load_corpus_from_git

log = logging.getLogger(__name__)

DEFAULT_COMMIT_LIMIT = 2000  # recent-history window mined per repository
PROMPT_EDIT_LINE_CAP = 200  # larger edits are truncated in prompts, never in records


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: tuple[str, ...]  # tagged lines: " ", "+", "-"


@dataclass(frozen=True)
class FileDiff:
    old_path: str
    new_path: str
    hunks: tuple[Hunk, ...]

    @property
    def added(self) -> int:
        return sum(1 for h in self.hunks for l in h.lines if l.startswith("+"))

    @property
    def removed(self) -> int:
        return sum(1 for h in self.hunks for l in h.lines if l.startswith("-"))


@dataclass(frozen=True)
class CommitRecord:
    sha: str
    message: str
    timestamp: int
    diffs: tuple[FileDiff, ...]

    @property
    def files_changed(self) -> int:
        return len(self.diffs)

    @property
    def lines_changed(self) -> int:
        return sum(d.added + d.removed for d in self.diffs)


@dataclass(frozen=True)
class EditRecord:
    origin: str  # commit sha, or a synthetic origin for pipeline-appended edits
    path: str
    function_id: Optional[str]
    before: str
    after: str
    message: str

    def __post_init__(self):
        if self.before == self.after:
            raise ValueError("an edit must change something")

    def to_json(self) -> dict:
        return {
            "origin": self.origin,
            "path": self.path,
            "function_id": self.function_id,
            "before": self.before,
            "after": self.after,
            "message": self.message,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EditRecord":
        return cls(
            origin=doc["origin"], path=doc["path"],
            function_id=doc.get("function_id"),
            before=doc["before"], after=doc["after"],
            message=doc.get("message", ""),
        )


@dataclass(frozen=True)
class RankedEdits:
    entries: tuple[tuple[EditRecord, RelevanceScore], ...]

    def __len__(self) -> int:
        return len(self.entries)

    def records(self) -> tuple[EditRecord, ...]:
        return tuple(e for e, _ in self.entries)


# --- unified diff parsing ------------------------------------------------------

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


def parse_unified_diff(text: str) -> list[FileDiff]:
    """Parse `diff --git` formatted output into per-file hunk lists."""
    diffs: list[FileDiff] = []
    old_path = new_path = ""
    hunks: list[Hunk] = []
    hunk_lines: list[str] = []
    hunk_header: Optional[tuple[int, int, int, int]] = None

    def flush_hunk():
        nonlocal hunk_header, hunk_lines
        if hunk_header is not None:
            hunks.append(Hunk(*hunk_header, tuple(hunk_lines)))
        hunk_header, hunk_lines = None, []

    def flush_file():
        nonlocal old_path, new_path, hunks
        flush_hunk()
        if old_path or new_path:
            diffs.append(FileDiff(old_path, new_path, tuple(hunks)))
        old_path, new_path, hunks = "", "", []

    for line in text.splitlines():
        if line.startswith("diff --git"):
            flush_file()
            continue
        if line.startswith("--- "):
            raw = line[4:].split("\t")[0]
            old_path = "" if raw == "/dev/null" else raw.removeprefix("a/")
            continue
        if line.startswith("+++ "):
            raw = line[4:].split("\t")[0]
            new_path = "" if raw == "/dev/null" else raw.removeprefix("b/")
            continue
        m = _HUNK_RE.match(line)
        if m:
            flush_hunk()
            hunk_header = (
                int(m.group(1)), int(m.group(2) or "1"),
                int(m.group(3)), int(m.group(4) or "1"),
            )
            continue
        if hunk_header is not None and line[:1] in (" ", "+", "-", ""):
            if line.startswith("\\"):  # "\ No newline at end of file"
                continue
            hunk_lines.append(line if line else " ")
    flush_file()
    return diffs


def apply_unified_diff(content: str, diffs: Iterable[FileDiff] | str) -> str:
    """Apply hunks to text, verifying context lines exactly."""
    if isinstance(diffs, str):
        diffs = parse_unified_diff(diffs)
    lines = content.split("\n")
    for fd in diffs:
        offset = 0
        for hunk in fd.hunks:
            pos = hunk.old_start - 1 + offset
            if hunk.old_count == 0:  # pure insertion: old_start is the line before
                pos = hunk.old_start + offset
            out: list[str] = []
            cursor = pos
            for tagged in hunk.lines:
                tag, payload = tagged[:1], tagged[1:]
                if tag == " ":
                    if cursor >= len(lines) or lines[cursor] != payload:
                        raise ValueError(
                            f"context mismatch at line {cursor + 1}: "
                            f"{lines[cursor] if cursor < len(lines) else '<eof>'!r} != {payload!r}"
                        )
                    out.append(payload)
                    cursor += 1
                elif tag == "-":
                    if cursor >= len(lines) or lines[cursor] != payload:
                        raise ValueError(f"removal mismatch at line {cursor + 1}")
                    cursor += 1
                elif tag == "+":
                    out.append(payload)
            lines[pos:cursor] = out
            offset += len(out) - (cursor - pos)
    return "\n".join(lines)


# --- commit mining ---------------------------------------------------------------

def _git(repo: str, *args: str) -> str:
    proc = subprocess.run(["git", "-C", repo, *args], capture_output=True, text=True)
    if proc.returncode != 0:
        raise RevisionNotFoundError(proc.stderr.strip() or " ".join(args))
    return proc.stdout


def mine_commits(repo: str, revision_range: Optional[str] = None,
                 limit: int = DEFAULT_COMMIT_LIMIT) -> list[CommitRecord]:
    """Read commits newest-first; merge commits carry their combined diff."""
    probe = subprocess.run(
        ["git", "-C", repo, "rev-parse", "--git-dir"], capture_output=True, text=True,
    )
    if probe.returncode != 0:
        raise NotARepoError(f"{repo} is not a git repository")
    target = revision_range or "HEAD"
    shas = _git(repo, "rev-list", f"--max-count={limit}", target).split()
    records = []
    for sha in shas:
        meta = _git(repo, "show", "-s", "--format=%ct%x00%B", sha)
        ts_raw, _, message = meta.partition("\x00")
        patch = _git(
            repo, "show", sha, "--format=", "--patch", "--no-color",
            "--no-renames", "--cc", "--unified=3",
        )
        records.append(
            CommitRecord(
                sha=sha,
                message=message.rstrip("\n"),
                timestamp=int(ts_raw.strip() or "0"),
                diffs=tuple(parse_unified_diff(patch)),
            )
        )
    return records


def snapshot_pair(repo: str, sha: str) -> tuple[Corpus, Corpus]:
    """Parsed corpora at a commit's parent and at the commit itself."""
    after = load_corpus_from_git(repo, sha)
    parent = subprocess.run(
        ["git", "-C", repo, "rev-parse", f"{sha}^"], capture_output=True, text=True,
    )
    if parent.returncode != 0:  # root commit
        return Corpus(), after
    before = load_corpus_from_git(repo, parent.stdout.strip())
    return before, after


# --- edit extraction --------------------------------------------------------------

def _function_at_line(unit_functions: list[FunctionRecord], line: int) -> Optional[FunctionRecord]:
    best = None
    for fn in unit_functions:
        if fn.start_line <= line <= fn.end_line:
            if best is None or fn.start_line >= best.start_line:  # innermost wins
                best = fn
    return best


def extract_edits(commit: CommitRecord, corpus_before: Corpus,
                  corpus_after: Corpus) -> list[EditRecord]:
    """Attribute changed hunks to enclosing functions.

    Function-level records carry the full old/new bodies; hunks outside any
    function become records with no function id and the raw hunk text.
    """
    excerpt = commit.message.splitlines()[0] if commit.message else ""
    seen_functions: set[str] = set()
    records: list[EditRecord] = []

    for fd in commit.diffs:
        path = fd.new_path or fd.old_path
        after_unit = corpus_after.units.get(path)
        before_unit = corpus_before.units.get(fd.old_path or path)
        before_index = {f.id: f for f in before_unit.functions} if before_unit else {}
        after_index = {f.id: f for f in after_unit.functions} if after_unit else {}
        after_functions = after_unit.functions if after_unit else []
        before_functions = before_unit.functions if before_unit else []

        touched: set[str] = set()
        for hunk in fd.hunks:
            outside_added: list[str] = []
            outside_removed: list[str] = []
            old_line, new_line = hunk.old_start, hunk.new_start
            for tagged in hunk.lines:
                tag, payload = tagged[:1], tagged[1:]
                if tag == " ":
                    old_line += 1
                    new_line += 1
                elif tag == "+":
                    fn = _function_at_line(after_functions, new_line)
                    if fn is not None:
                        touched.add(fn.id)
                    else:
                        outside_added.append(payload)
                    new_line += 1
                elif tag == "-":
                    fn = _function_at_line(before_functions, old_line)
                    if fn is not None:
                        touched.add(fn.id)
                    else:
                        outside_removed.append(payload)
                    old_line += 1
            removed_text = "\n".join(outside_removed)
            added_text = "\n".join(outside_added)
            if removed_text != added_text:
                records.append(EditRecord(
                    origin=commit.sha, path=path, function_id=None,
                    before=removed_text, after=added_text, message=excerpt,
                ))

        for fid in sorted(touched):
            if fid in seen_functions:
                continue
            seen_functions.add(fid)
            before_body = before_index[fid].body if fid in before_index else ""
            after_body = after_index[fid].body if fid in after_index else ""
            if before_body != after_body:
                records.append(EditRecord(
                    origin=commit.sha, path=path, function_id=fid,
                    before=before_body, after=after_body, message=excerpt,
                ))
    return records


def collect_history(repo: str, revision_range: Optional[str] = None,
                    limit: int = DEFAULT_COMMIT_LIMIT) -> list[EditRecord]:
    """Mine a repo and extract function-level edits for every commit."""
    edits: list[EditRecord] = []
    for commit in mine_commits(repo, revision_range, limit):
        before, after = snapshot_pair(repo, commit.sha)
        edits.extend(extract_edits(commit, before, after))
    return edits


# --- ranking -----------------------------------------------------------------------

def rank_edits(function: FunctionRecord, edits: Iterable[EditRecord],
               scorer: RelevanceScorer) -> RankedEdits:
    """Sort edits by descending relevance to the function under optimization.

    Every input edit appears exactly once; ties fall back to (origin, path).
    """
    scored = []
    for edit in edits:
        text = edit.after or edit.before
        score = scorer.score_pair(function.id, function.body, edit.function_id, text)
        scored.append((edit, score))
    scored.sort(key=lambda pair: (-pair[1].combined, pair[0].origin, pair[0].path))
    return RankedEdits(entries=tuple(scored))


# --- edit-log persistence -----------------------------------------------------------

def save_edit_log(edits: Iterable[EditRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for edit in edits:
            fh.write(json.dumps(edit.to_json(), sort_keys=True) + "\n")


def load_edit_log(path: str) -> list[EditRecord]:
    edits = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                edits.append(EditRecord.from_json(json.loads(line)))
    return edits


def truncate_for_prompt(edit: EditRecord, line_cap: int = PROMPT_EDIT_LINE_CAP) -> str:
    """Prompt rendering of an edit; oversized bodies are clipped, records are not."""
    def clip(text: str) -> str:
        lines = text.split("\n")
        if len(lines) <= line_cap:
            return text
        return "\n".join(lines[:line_cap]) + f"\n... [{len(lines) - line_cap} lines truncated]"

    header = f"# edit {edit.origin[:12]} {edit.path}"
    if edit.function_id:
        header += f" ({edit.function_id})"
    if edit.message:
        header += f": {edit.message}"
    return f"{header}\n--- before\n{clip(edit.before)}\n--- after\n{clip(edit.after)}"

"""Parse a Python corpus into a function inventory and build its call graph.

Name resolution is static and best-effort: same-module scope first, then
explicit imports, then a corpus-unique short-name match. Dynamic dispatch,
inheritance overrides and reflection are not resolved; unresolved calls are
recorded as external and produce no edge.
"""

from __future__ import annotations

import ast
import logging
import subprocess
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import NotARepoError, RevisionNotFoundError, UnknownFunctionError

log = logging.getLogger(__name__)

UNBOUNDED = None  # depth sentinel for full transitive traversal


@dataclass(frozen=True)
class FunctionRecord:
    """One function definition: qualified id, byte span and source body."""

    id: str
    path: str
    span: tuple[int, int]  # byte range into the file content
    body: str
    signature: tuple[str, ...]  # parameter names in order
    doc: Optional[str] = None
    start_line: int = 0  # 1-based, at the `def` keyword
    end_line: int = 0

    @property
    def name(self) -> str:
        return self.id.rsplit(".", 1)[-1]


@dataclass
class SourceUnit:
    """A parsed source file with its function inventory."""

    path: str
    content: str
    functions: list[FunctionRecord] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CallGraph:
    """Directed caller -> callee graph over qualified function ids."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str, tuple[int, int]], ...]  # (caller, callee, call-site span)
    external_calls: tuple[tuple[str, str], ...] = ()  # (caller, unresolved name)

    def adjacency(self) -> dict[str, set[str]]:
        adj: dict[str, set[str]] = {n: set() for n in self.nodes}
        for caller, callee, _ in self.edges:
            adj[caller].add(callee)
        return adj

    def reverse_adjacency(self) -> dict[str, set[str]]:
        radj: dict[str, set[str]] = {n: set() for n in self.nodes}
        for caller, callee, _ in self.edges:
            radj[callee].add(caller)
        return radj

    def to_json(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [
                {"caller": c, "callee": e, "span": [s[0], s[1]]}
                for c, e, s in self.edges
            ],
            "external_calls": [
                {"caller": c, "name": n} for c, n in self.external_calls
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CallGraph":
        return cls(
            nodes=tuple(doc["nodes"]),
            edges=tuple(
                (e["caller"], e["callee"], (e["span"][0], e["span"][1]))
                for e in doc["edges"]
            ),
            external_calls=tuple(
                (e["caller"], e["name"]) for e in doc.get("external_calls", [])
            ),
        )


def module_name_for_path(path: str) -> str:
    name = path.replace("\\", "/")
    if name.endswith(".py"):
        name = name[:-3]
    if name.endswith("/__init__"):
        name = name[: -len("/__init__")]
    return name.strip("/").replace("/", ".")


def _line_start_bytes(content: str) -> list[int]:
    starts = [0]
    for line in content.split("\n")[:-1]:
        starts.append(starts[-1] + len(line.encode("utf-8")) + 1)
    return starts


class _FunctionCollector(ast.NodeVisitor):
    """Collects every def/async def with its dotted scope; lambdas excluded."""

    def __init__(self, module: str, content: str):
        self.module = module
        self.content_bytes = content.encode("utf-8")
        self.line_starts = _line_start_bytes(content)
        self.scope: list[str] = []
        self.records: list[FunctionRecord] = []

    def _byte_pos(self, lineno: int, col: int) -> int:
        # ast column offsets are already utf-8 byte offsets within the line
        return self.line_starts[lineno - 1] + col

    def _record(self, node) -> None:
        start = self._byte_pos(node.lineno, node.col_offset)
        end = self._byte_pos(node.end_lineno, node.end_col_offset)
        qualified = ".".join([self.module, *self.scope, node.name])
        params = [a.arg for a in node.args.posonlyargs]
        params += [a.arg for a in node.args.args]
        if node.args.vararg:
            params.append("*" + node.args.vararg.arg)
        params += [a.arg for a in node.args.kwonlyargs]
        if node.args.kwarg:
            params.append("**" + node.args.kwarg.arg)
        self.records.append(
            FunctionRecord(
                id=qualified,
                path="",  # filled by parse_unit
                span=(start, end),
                body=self.content_bytes[start:end].decode("utf-8"),
                signature=tuple(params),
                doc=ast.get_docstring(node, clean=False),
                start_line=node.lineno,
                end_line=node.end_lineno,
            )
        )

    def visit_FunctionDef(self, node):
        self._record(node)
        self.scope.append(node.name)
        self.generic_visit(node)
        self.scope.pop()

    visit_AsyncFunctionDef = visit_FunctionDef

    def visit_ClassDef(self, node):
        self.scope.append(node.name)
        self.generic_visit(node)
        self.scope.pop()


def parse_unit(path: str, content: str) -> SourceUnit:
    """Parse one file; broken syntax yields zero functions plus a diagnostic."""
    unit = SourceUnit(path=path, content=content)
    try:
        tree = ast.parse(content)
    except SyntaxError as err:
        unit.diagnostics.append(f"syntax error: {err.msg} at line {err.lineno}")
        return unit
    collector = _FunctionCollector(module_name_for_path(path), content)
    collector.visit(tree)
    unit.functions = [
        FunctionRecord(
            id=r.id, path=path, span=r.span, body=r.body, signature=r.signature,
            doc=r.doc, start_line=r.start_line, end_line=r.end_line,
        )
        for r in collector.records
    ]
    return unit


@dataclass
class Corpus:
    """One parsed snapshot of a project tree."""

    units: dict[str, SourceUnit] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def add(self, unit: SourceUnit) -> None:
        self.units[unit.path] = unit

    def functions(self) -> Iterable[FunctionRecord]:
        for path in sorted(self.units):
            yield from self.units[path].functions

    def function_index(self) -> dict[str, FunctionRecord]:
        return {fn.id: fn for fn in self.functions()}

    def get_function(self, function_id: str) -> FunctionRecord:
        fn = self.function_index().get(function_id)
        if fn is None:
            raise UnknownFunctionError(f"no function {function_id!r} in corpus")
        return fn


def load_corpus_from_dir(root: str) -> Corpus:
    import os

    corpus = Corpus()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in ("__pycache__", ".git"))
        for fname in sorted(filenames):
            if not fname.endswith(".py"):
                continue
            full = os.path.join(dirpath, fname)
            rel = os.path.relpath(full, root)
            try:
                with open(full, "r", encoding="utf-8") as fh:
                    content = fh.read()
            except (UnicodeDecodeError, OSError) as err:
                corpus.warnings.append(f"UNDECODABLE_FILE: {rel}: {err}")
                log.warning("skipping undecodable file %s: %s", rel, err)
                continue
            corpus.add(parse_unit(rel, content))
    return corpus


def load_corpus_from_git(repo: str, revision: str) -> Corpus:
    def run(*args: str) -> str:
        proc = subprocess.run(
            ["git", "-C", repo, *args], capture_output=True, text=True,
        )
        if proc.returncode != 0:
            raise RevisionNotFoundError(proc.stderr.strip())
        return proc.stdout

    probe = subprocess.run(
        ["git", "-C", repo, "rev-parse", "--git-dir"], capture_output=True, text=True,
    )
    if probe.returncode != 0:
        raise NotARepoError(f"{repo} is not a git repository")
    corpus = Corpus()
    listing = run("ls-tree", "-r", "--name-only", revision)
    for rel in sorted(p for p in listing.splitlines() if p.endswith(".py")):
        blob = subprocess.run(
            ["git", "-C", repo, "show", f"{revision}:{rel}"],
            capture_output=True,
        )
        if blob.returncode != 0:
            continue
        try:
            content = blob.stdout.decode("utf-8")
        except UnicodeDecodeError as err:
            corpus.warnings.append(f"UNDECODABLE_FILE: {rel}: {err}")
            continue
        corpus.add(parse_unit(rel, content))
    return corpus


# --- call graph construction -------------------------------------------------

def _import_map(tree: ast.Module, module: str) -> dict[str, str]:
    """name -> dotted import target, collected over the whole module."""
    mapping: dict[str, str] = {}
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                if alias.asname:
                    mapping[alias.asname] = alias.name
                else:
                    root = alias.name.split(".")[0]
                    mapping.setdefault(root, root)
        elif isinstance(node, ast.ImportFrom):
            if node.level:
                base_parts = module.split(".")
                # level 1 strips the module segment, deeper levels strip packages
                base_parts = base_parts[: len(base_parts) - node.level]
                base = ".".join(base_parts)
            else:
                base = ""
            target_module = node.module or ""
            if base and target_module:
                target_module = f"{base}.{target_module}"
            elif base:
                target_module = base
            for alias in node.names:
                if alias.name == "*":
                    continue
                target = f"{target_module}.{alias.name}" if target_module else alias.name
                mapping[alias.asname or alias.name] = target
    return mapping


def _dotted_chain(node: ast.expr) -> Optional[str]:
    parts: list[str] = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        parts.append(node.id)
        return ".".join(reversed(parts))
    return None


class _CallExtractor(ast.NodeVisitor):
    """Yields Call nodes lexically owned by one function (nested defs skipped)."""

    def __init__(self):
        self.calls: list[ast.Call] = []
        self._root = True

    def visit_FunctionDef(self, node):
        if self._root:
            self._root = False
            for stmt in node.body:
                self.visit(stmt)
        # nested defs belong to their own record; do not descend

    visit_AsyncFunctionDef = visit_FunctionDef

    def visit_Lambda(self, node):
        pass

    def visit_Call(self, node):
        self.calls.append(node)
        self.generic_visit(node)


def build_call_graph(units: Iterable[SourceUnit]) -> CallGraph:
    units = list(units)
    function_ids: set[str] = set()
    by_short_name: dict[str, list[str]] = defaultdict(list)
    for unit in units:
        for fn in unit.functions:
            function_ids.add(fn.id)
            by_short_name[fn.name].append(fn.id)

    edges: set[tuple[str, str, tuple[int, int]]] = set()
    externals: set[tuple[str, str]] = set()

    for unit in units:
        try:
            tree = ast.parse(unit.content)
        except SyntaxError:
            continue
        module = module_name_for_path(unit.path)
        imports = _import_map(tree, module)
        line_starts = _line_start_bytes(unit.content)

        def byte_span(node) -> tuple[int, int]:
            return (
                line_starts[node.lineno - 1] + node.col_offset,
                line_starts[node.end_lineno - 1] + node.end_col_offset,
            )

        # map each function record to its AST node by span
        nodes_by_span = {}
        for ast_node in ast.walk(tree):
            if isinstance(ast_node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                nodes_by_span[byte_span(ast_node)] = ast_node

        for fn in unit.functions:
            ast_node = nodes_by_span.get(fn.span)
            if ast_node is None:
                continue
            extractor = _CallExtractor()
            extractor.visit(ast_node)
            scope_prefixes = _scope_prefixes(fn.id, module)
            for call in extractor.calls:
                target = _resolve_call(
                    call, module, scope_prefixes, imports, function_ids, by_short_name,
                )
                if target is None:
                    name = _call_display_name(call)
                    if name:
                        externals.add((fn.id, name))
                    continue
                edges.add((fn.id, target, byte_span(call)))

    return CallGraph(
        nodes=tuple(sorted(function_ids)),
        edges=tuple(sorted(edges)),
        external_calls=tuple(sorted(externals)),
    )


def _scope_prefixes(function_id: str, module: str) -> list[str]:
    """Enclosing scopes of a function, innermost first, ending at the module."""
    parts = function_id.split(".")
    module_parts = module.split(".")
    inner = parts[len(module_parts):-1]  # class/function scope segments
    prefixes = []
    for i in range(len(inner), -1, -1):
        prefixes.append(".".join(module_parts + inner[:i]))
    return prefixes


def _call_display_name(call: ast.Call) -> Optional[str]:
    if isinstance(call.func, ast.Name):
        return call.func.id
    chain = _dotted_chain(call.func)
    return chain


def _resolve_call(call, module, scope_prefixes, imports, function_ids, by_short_name):
    func = call.func
    if isinstance(func, ast.Name):
        name = func.id
        for prefix in scope_prefixes:
            candidate = f"{prefix}.{name}"
            if candidate in function_ids:
                return candidate
        target = imports.get(name)
        if target and target in function_ids:
            return target
        matches = by_short_name.get(name, [])
        if len(matches) == 1:
            return matches[0]
        return None
    if isinstance(func, ast.Attribute):
        chain = _dotted_chain(func)
        if chain is None:
            return None
        root, _, rest = chain.partition(".")
        if root in ("self", "cls") and rest and "." not in rest:
            # method call within the innermost enclosing class
            for prefix in scope_prefixes:
                candidate = f"{prefix}.{rest}"
                if candidate in function_ids:
                    return candidate
        target_root = imports.get(root)
        if target_root and rest:
            candidate = f"{target_root}.{rest}"
            if candidate in function_ids:
                return candidate
        if chain in function_ids:
            return chain
    return None


# --- traversal ----------------------------------------------------------------

def _bfs(adjacency: dict[str, set[str]], start: str, depth: Optional[int]) -> set[str]:
    if depth is not None and depth < 1:
        raise ValueError("depth must be >= 1 or unbounded")
    seen: set[str] = set()
    frontier = {start}
    level = 0
    while frontier and (depth is None or level < depth):
        level += 1
        nxt: set[str] = set()
        for node in frontier:
            for neigh in adjacency.get(node, ()):
                if neigh not in seen:
                    seen.add(neigh)
                    nxt.add(neigh)
        frontier = nxt
    return seen


def callees_of(graph: CallGraph, function_id: str, depth: Optional[int] = UNBOUNDED) -> set[str]:
    """Functions reachable from `function_id` along call edges, up to `depth`."""
    if function_id not in graph.nodes:
        raise UnknownFunctionError(f"{function_id!r} not in call graph")
    return _bfs(graph.adjacency(), function_id, depth)


def callers_of(graph: CallGraph, function_id: str, depth: Optional[int] = UNBOUNDED) -> set[str]:
    """Functions from which `function_id` is reachable, up to `depth`."""
    if function_id not in graph.nodes:
        raise UnknownFunctionError(f"{function_id!r} not in call graph")
    return _bfs(graph.reverse_adjacency(), function_id, depth)


def call_argument_counts(corpus: Corpus, graph: CallGraph, callee_id: str) -> list[int]:
    """Positional-argument counts at every resolved call site of `callee_id`.

    Sites using *args unpacking are skipped (arity cannot be checked
    statically). Used for caller-compatibility checks after edits.
    """
    counts: list[int] = []
    sites_by_unit: dict[str, list[tuple[int, int]]] = defaultdict(list)
    caller_paths = {fn.id: fn.path for fn in corpus.functions()}
    for caller, callee, span in graph.edges:
        if callee == callee_id and caller in caller_paths:
            sites_by_unit[caller_paths[caller]].append(span)
    for path, spans in sites_by_unit.items():
        unit = corpus.units.get(path)
        if unit is None:
            continue
        try:
            tree = ast.parse(unit.content)
        except SyntaxError:
            continue
        line_starts = _line_start_bytes(unit.content)
        wanted = set(spans)
        for node in ast.walk(tree):
            if not isinstance(node, ast.Call):
                continue
            span = (
                line_starts[node.lineno - 1] + node.col_offset,
                line_starts[node.end_lineno - 1] + node.end_col_offset,
            )
            if span in wanted:
                if any(isinstance(a, ast.Starred) for a in node.args):
                    continue
                counts.append(len(node.args))
    return sorted(counts)

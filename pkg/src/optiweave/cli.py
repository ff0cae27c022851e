"""Command-line entry points for the optimization pipeline.

Subcommands: plan (sequence construction), edits (associated-edit selection),
optimize (full editing run over a task bundle), bench build, evaluate, and
knowledge ingest/query. Artifacts are written atomically and every error
family maps to a distinct exit code.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import tempfile

import click

from . import config as config_mod
from .bench_builder import TaskBundle, build_tasks
from .edit_agent import identify_valid_edits, save_transcript
from .edit_history import collect_history, load_edit_log, rank_edits
from .errors import ConfigInvalidError, PipelineError, exit_code_for
from .eval_harness import EvalConfig, MeasurementRecord, aggregate, run_task
from .knowledge_store import KnowledgeIndex
from .model_gateway import InteractionLog
from .optimize_pipeline import (
    OptimizationTask,
    PipelineConfig,
    PipelineProviders,
    ProjectPatch,
    apply_patch,
    render_patch_diff,
    run_sequence,
)
from .probes import select_probe
from .relevance import build_sequence
from .syntax_graph import (
    build_call_graph,
    load_corpus_from_dir,
    load_corpus_from_git,
)

log = logging.getLogger("optiweave")


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".optiweave-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _load_corpus(repo: str, rev: str | None):
    if rev:
        return load_corpus_from_git(repo, rev)
    return load_corpus_from_dir(repo)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Pipeline configuration document (YAML).")
@click.option("--log-level", default=os.environ.get("OPTIWEAVE_LOG", "WARNING"),
              show_default=True)
@click.pass_context
def cli(ctx, config_path, log_level):
    """Project-level code efficiency optimization pipeline."""
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = config_mod.load_config(config_path)


@cli.command()
@click.option("--repo", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--target", "target_id", required=True, help="Qualified target function id.")
@click.option("--rev", default=None, help="Git revision to snapshot instead of the worktree.")
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="Write the sequence JSON here (default: stdout).")
@click.option("--emit-sequence", "emit_sequence", default=None,
              type=click.Path(dir_okay=False),
              help="Additional path for the sequence JSON artifact.")
@click.option("--emit-graph", default=None, type=click.Path(dir_okay=False),
              help="Also write the call graph JSON.")
@click.pass_obj
def plan(config, repo, target_id, rev, out, emit_sequence, emit_graph):
    """Construct the optimizing function sequence for a target function."""
    corpus = _load_corpus(repo, rev)
    graph = build_call_graph(corpus.units.values())
    scorer = config_mod.build_relevance_scorer(config, graph)
    sequence = build_sequence(
        graph, corpus, target_id, scorer,
        threshold=config.relevance.threshold, depth=config.relevance.depth,
    )
    if emit_graph:
        _write_atomic(emit_graph, _dump(graph.to_json()))
    payload = _dump(sequence.to_json())
    if emit_sequence:
        _write_atomic(emit_sequence, payload)
    if out:
        _write_atomic(out, payload)
    elif not emit_sequence:
        click.echo(payload, nl=False)


@cli.command()
@click.option("--repo", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--target", "target_id", required=True)
@click.option("--history", "history_path", default=None, type=click.Path(exists=True),
              help="Edit-log JSONL; mined from the repo when omitted.")
@click.option("--limit", default=2000, show_default=True,
              help="Commit window when mining history.")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
@click.option("--transcript", "transcript_path", default=None, type=click.Path(dir_okay=False))
@click.pass_obj
def edits(config, repo, target_id, history_path, limit, out, transcript_path):
    """Select valid associated edits for a function from ranked history."""
    corpus = _load_corpus(repo, None)
    graph = build_call_graph(corpus.units.values())
    fn = corpus.get_function(target_id)
    if history_path:
        history = load_edit_log(history_path)
    else:
        history = collect_history(repo, limit=limit)
    scorer = config_mod.build_relevance_scorer(config, graph)
    ranked = rank_edits(fn, history, scorer)
    interaction_log = InteractionLog(config.interaction_log or None)
    agent = config_mod.require_provider(config, "agent", interaction_log)
    valid, transcript = identify_valid_edits(fn, ranked, agent,
                                             config.agent.to_agent_config())
    if transcript_path:
        save_transcript(transcript, transcript_path)
    payload = _dump(valid.to_json())
    if out:
        _write_atomic(out, payload)
    else:
        click.echo(payload, nl=False)


@cli.command()
@click.option("--task", "bundle_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Patch manifest JSON output path.")
@click.option("--diff", "diff_path", default=None, type=click.Path(dir_okay=False),
              help="Also render the patch as a unified diff.")
@click.option("--report", "report_path", default=None, type=click.Path(dir_okay=False))
@click.pass_obj
def optimize(config, bundle_dir, out, diff_path, report_path):
    """Run the full optimization editing pipeline over a task bundle."""
    bundle = TaskBundle.load(bundle_dir)
    corpus = bundle.corpus()
    graph = build_call_graph(corpus.units.values())
    scorer = config_mod.build_relevance_scorer(config, graph)
    interaction_log = InteractionLog(config.interaction_log or None)

    sequence = build_sequence(
        graph, corpus, bundle.target_id, scorer,
        threshold=config.relevance.threshold, depth=config.relevance.depth,
    )
    providers = PipelineProviders(
        edit_model=config_mod.require_provider(config, "editor", interaction_log),
        optimizer_model=config_mod.require_provider(config, "optimizer", interaction_log),
        agent_model=config_mod.require_provider(config, "agent", interaction_log),
        scorer=scorer,
        knowledge=config_mod.build_knowledge_index(config)
        if config.pipeline.enable_retrieval else None,
    )
    per_function_gate = None
    if config.pipeline.per_function_gate and bundle.tests:
        fast_subset = bundle.tests[:1]

        def per_function_gate(corpus_state):
            return _run_test_subset(bundle, corpus_state, fast_subset)

    pipe_config = PipelineConfig(
        enable_vae=config.pipeline.enable_vae,
        enable_retrieval=config.pipeline.enable_retrieval,
        retrieval_k=config.retrieval.k,
        agent=config.agent.to_agent_config(),
        budget_chars=config.pipeline.budget_chars,
        per_function_gate=per_function_gate,
    )
    task = OptimizationTask(
        corpus=corpus, target_id=bundle.target_id,
        task_prompt=bundle.task_prompt, history=bundle.history(),
        base_revision=bundle.manifest["project"]["revision"],
    )
    patch, report = run_sequence(task, sequence, providers, pipe_config)

    gate = None
    if config.pipeline.validation_gate and bundle.tests:
        gate = _validation_gate(bundle, patch)
        if not gate["passed"]:
            log.warning("validation gate failed: %s", gate)
    report_doc = report.to_json()
    report_doc["sequence"] = sequence.to_json()
    report_doc["validation_gate"] = gate

    _write_atomic(out, _dump(patch.to_json()))
    if diff_path:
        _write_atomic(diff_path, render_patch_diff(corpus, patch))
    if report_path:
        _write_atomic(report_path, _dump(report_doc))
    click.echo(f"patch written to {out} "
               f"({sum(0 if e.is_noop else 1 for e in patch.entries)} edited, "
               f"{sum(1 for e in patch.entries if e.is_noop)} no-op)")


def _run_tests_on_tree(bundle: TaskBundle, units: dict, tests: list[str]) -> dict:
    import shutil

    workdir = tempfile.mkdtemp(prefix="optiweave-gate-")
    try:
        project = os.path.join(workdir, "project")
        shutil.copytree(bundle.project_root, project,
                        ignore=shutil.ignore_patterns("__pycache__", "*.pyc", ".pytest_cache"))
        for path, content in units.items():
            with open(os.path.join(project, path), "w", encoding="utf-8") as fh:
                fh.write(content)
        env = dict(os.environ)
        env["PYTHONPATH"] = project + os.pathsep + env.get("PYTHONPATH", "")
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", *tests],
            cwd=project, env=env, capture_output=True, timeout=300,
        )
        return {"passed": proc.returncode == 0, "exit_code": proc.returncode,
                "tests": list(tests)}
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def _validation_gate(bundle: TaskBundle, patch: ProjectPatch) -> dict:
    """Post-sequence gate: apply the patch and run the bundle's tests once."""
    patched = apply_patch(bundle.corpus(), patch)
    units = {path: patched.units[path].content for path in patched.units}
    return _run_tests_on_tree(bundle, units, bundle.tests)


def _run_test_subset(bundle: TaskBundle, corpus_state, tests: list[str]) -> bool:
    units = {path: corpus_state.units[path].content for path in corpus_state.units}
    return _run_tests_on_tree(bundle, units, tests)["passed"]


@cli.group()
def bench():
    """Benchmark construction commands."""


@bench.command("build")
@click.option("--repo", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--rev-range", default=None, help="Restrict mining to a revision range.")
@click.pass_obj
def bench_build(config, repo, out_dir, rev_range):
    """Filter a repository's history into task bundles."""
    interaction_log = InteractionLog(config.interaction_log or None)
    model = config_mod.require_provider(config, "confirmer", interaction_log)
    report = build_tasks(repo, out_dir, model,
                         config.bench.to_filter_config(), rev_range)
    os.makedirs(out_dir, exist_ok=True)
    _write_atomic(os.path.join(out_dir, "build_report.json"), _dump(report.to_json()))
    click.echo(f"emitted {len(report.emitted)} bundles "
               f"({report.mined} mined, {report.after_keyword} after keywords, "
               f"{report.after_size} after size, {report.after_semantic} confirmed)")


@cli.command()
@click.option("--bundle", "bundle_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--patch", "patch_path", required=True, type=click.Path(exists=True))
@click.option("--baseline", "baseline_path", default=None, type=click.Path(exists=True),
              help="Precomputed baseline MeasurementRecord JSON list.")
@click.option("--measure-baseline", is_flag=True,
              help="Measure the unpatched project as the baseline variant.")
@click.option("--measure-gt", is_flag=True,
              help="Measure the ground-truth patch for speedup.")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
@click.pass_obj
def evaluate(config, bundle_dir, patch_path, baseline_path, measure_baseline,
             measure_gt, out):
    """Evaluate a patch: correctness, opt rate and speedup."""
    bundle = TaskBundle.load(bundle_dir)
    patch = ProjectPatch.load(patch_path)
    eval_config = EvalConfig(
        probe=config_mod.build_probe_selection(config),
        repeats=config.eval.repeats,
        test_timeout=config.eval.test_timeout,
    )
    probe = select_probe(eval_config.probe)
    outcomes, records = [], []
    outcome, record = run_task(bundle, patch, "method", eval_config, probe)
    outcomes.append(outcome)
    records.append(record)
    if measure_baseline:
        base_outcome, base_record = run_task(bundle, None, "baseline", eval_config, probe)
        outcomes.append(base_outcome)
        records.append(base_record)
    if baseline_path:
        with open(baseline_path, "r", encoding="utf-8") as fh:
            records.extend(MeasurementRecord.from_json(doc) for doc in json.load(fh))
    if measure_gt:
        gt_outcome, gt_record = run_task(bundle, None, "ground_truth", eval_config,
                                         probe, ground_truth=True)
        outcomes.append(gt_outcome)
        records.append(gt_record)
    report = aggregate(records, outcomes)
    if out:
        _write_atomic(out, _dump(report.to_json()))
    click.echo(report.summary_table())


@cli.group()
def knowledge():
    """Snippet index maintenance and queries."""


@knowledge.command("ingest")
@click.option("--index", "index_path", required=True, type=click.Path(dir_okay=False))
@click.option("--origin", type=click.Choice(["internal", "external"]), required=True)
@click.option("--source-tag", default="", help="Provenance label for the snippets.")
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.pass_obj
def knowledge_ingest(config, index_path, origin, source_tag, paths):
    """Index every function found under the given files or directories."""
    embedder = config_mod.build_embedder(config.embedder)
    if os.path.exists(index_path):
        index = KnowledgeIndex.load(index_path, embedder)
    else:
        index = KnowledgeIndex(embedder)
    items = []
    for path in paths:
        corpus = load_corpus_from_dir(path) if os.path.isdir(path) else None
        if corpus is None:
            from .syntax_graph import parse_unit

            with open(path, "r", encoding="utf-8") as fh:
                unit = parse_unit(os.path.basename(path), fh.read())
            functions = unit.functions
        else:
            functions = list(corpus.functions())
        items.extend((fn.id, fn.body) for fn in functions)
    stats = index.ingest(items, origin=origin, source_tag=source_tag or origin)
    index.save(index_path)
    click.echo(_dump({"ingested": len(items), "stats": stats}), nl=False)


@knowledge.command("query")
@click.option("--index", "index_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--text", default=None, help="Query text (or use --file).")
@click.option("--file", "file_path", default=None, type=click.Path(exists=True))
@click.option("--k", default=3, show_default=True)
@click.option("--origin", type=click.Choice(["internal", "external"]), default=None)
@click.pass_obj
def knowledge_query(config, index_path, text, file_path, k, origin):
    """Retrieve the most similar indexed snippets for a query."""
    if not text and not file_path:
        raise ConfigInvalidError("provide --text or --file")
    if file_path:
        with open(file_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    embedder = config_mod.build_embedder(config.embedder)
    index = KnowledgeIndex.load(index_path, embedder)
    result = index.retrieve_similar(text, k=k, filter_origin=origin)
    click.echo(_dump({
        "entries": [
            {"id": s.id, "origin": s.origin, "similarity": sim, "body": s.body}
            for s, sim in result.entries
        ]
    }), nl=False)


def main() -> None:
    try:
        cli(standalone_mode=False)
    except PipelineError as err:
        click.echo(f"error[{err.code}]: {err.message}", err=True)
        sys.exit(exit_code_for(err))
    except click.ClickException as err:
        err.show()
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(130)


if __name__ == "__main__":
    main()

"""Execute task tests against candidate patches and compute the metrics.

Correctness is pass@1 over the bundle's tests; efficiency is measured in
instruction counts: opt rate against a baseline variant and speedup against
the human ground truth. Tasks failing correctness are excluded from the
efficiency aggregates and listed explicitly.
"""

from __future__ import annotations

import logging
import os
import shutil
import statistics
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .bench_builder import TaskBundle
from .errors import (
    EmptySetError,
    EnvSetupError,
    MeasurementTimeoutError,
    MissingBaselineError,
    ZeroBaselineError,
    ZeroMethodCountError,
)
from .optimize_pipeline import ProjectPatch, apply_patch
from .probes import ProbeRunner, ProbeSelection, select_probe
from .syntax_graph import load_corpus_from_dir

log = logging.getLogger(__name__)

DEFAULT_TEST_TIMEOUT = 60.0
DEFAULT_REPEATS = 1  # trace backend is deterministic; hardware wants 3+

VARIANTS = ("baseline", "method", "ground_truth")


@dataclass(frozen=True)
class MeasurementRecord:
    task_id: str
    variant: str
    instruction_count: int  # median across repeats
    backend: str
    repeats: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "variant": self.variant,
            "instruction_count": self.instruction_count,
            "backend": self.backend,
            "repeats": list(self.repeats),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MeasurementRecord":
        return cls(
            task_id=doc["task_id"], variant=doc["variant"],
            instruction_count=int(doc["instruction_count"]),
            backend=doc["backend"], repeats=tuple(int(r) for r in doc["repeats"]),
        )


@dataclass(frozen=True)
class TestOutcome:
    task_id: str
    variant: str
    passed: dict  # test id -> bool

    @property
    def pass_at_1(self) -> bool:
        return bool(self.passed) and all(self.passed.values())

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "variant": self.variant,
                "passed": dict(self.passed), "pass_at_1": self.pass_at_1}


@dataclass
class EvalConfig:
    probe: ProbeSelection = field(default_factory=ProbeSelection)
    repeats: int = DEFAULT_REPEATS
    test_timeout: float = DEFAULT_TEST_TIMEOUT
    keep_workdir: bool = False


def _materialize(bundle: TaskBundle, patch: Optional[ProjectPatch],
                 bodies: Optional[dict[str, str]] = None) -> str:
    """Copy the bundle project into a scratch tree, optionally patched."""
    root = bundle.project_root
    if not os.path.isdir(root):
        raise EnvSetupError(f"bundle project root missing: {root}")
    workdir = tempfile.mkdtemp(prefix="optiweave-eval-")
    try:
        target = os.path.join(workdir, "project")
        # stale caches carry their compile-time paths and would escape the
        # probe's measurement scope
        shutil.copytree(root, target,
                        ignore=shutil.ignore_patterns("__pycache__", "*.pyc",
                                                      ".pytest_cache"))
        if patch is not None or bodies:
            corpus = load_corpus_from_dir(target)
            if patch is None:
                from .optimize_pipeline import PatchEntry

                index = corpus.function_index()
                entries = tuple(
                    PatchEntry(fid, index[fid].path, index[fid].body, body)
                    for fid, body in sorted((bodies or {}).items())
                )
                patch = ProjectPatch(base_revision="bundle", entries=entries)
            patched = apply_patch(corpus, patch)
            for path in patched.units:
                full = os.path.join(target, path)
                with open(full, "w", encoding="utf-8") as fh:
                    fh.write(patched.units[path].content)
    except BaseException:
        shutil.rmtree(workdir, ignore_errors=True)
        raise
    return workdir


def _environment_for(bundle: TaskBundle, project_dir: str) -> dict[str, str]:
    env = dict(os.environ)
    env["PYTHONPATH"] = project_dir + os.pathsep + env.get("PYTHONPATH", "")
    env.setdefault("PYTHONHASHSEED", "0")
    env["PYTHONDONTWRITEBYTECODE"] = "1"
    manifest_env = bundle.environment()
    if manifest_env.get("kind") == "container":
        log.warning(
            "bundle %s declares a container environment; running in the local "
            "interpreter instead — measurements may not match the declared image",
            bundle.task_id,
        )
    for key, value in manifest_env.get("env", {}).items():
        env[str(key)] = str(value)
    return env


def _attribute_failures(project_dir: str, env: dict, tests: list[str],
                        timeout: float) -> dict[str, bool]:
    """Per-test verdicts via plain runs; used only when the combined run fails."""
    import subprocess
    import sys

    verdicts = {}
    for test_id in tests:
        try:
            proc = subprocess.run(
                [sys.executable, "-m", "pytest", "-q", test_id],
                cwd=project_dir, env=env, capture_output=True, timeout=timeout,
            )
            verdicts[test_id] = proc.returncode == 0
        except subprocess.TimeoutExpired:
            verdicts[test_id] = False
    return verdicts


def run_task(bundle: TaskBundle, patch: Optional[ProjectPatch] = None,
             variant: str = "method",
             config: Optional[EvalConfig] = None,
             probe: Optional[ProbeRunner] = None,
             ground_truth: bool = False) -> tuple[TestOutcome, MeasurementRecord]:
    """Measure one variant: a single probe run over the bundle's test set.

    With ground_truth=True the bundle's human patch is applied instead of the
    supplied one. A clean exit means every test passed; on failure or timeout
    the tests are rerun individually (without counting) to attribute the
    failures. The per-repeat counts of the combined run become the record's
    repeats; the stored instruction_count is their median.
    """
    config = config or EvalConfig()
    if probe is None:
        probe = select_probe(config.probe)
    bodies = bundle.ground_truth_bodies() if ground_truth else None
    workdir = _materialize(bundle, patch, bodies)
    project_dir = os.path.join(workdir, "project")
    env = _environment_for(bundle, project_dir)
    tests = bundle.tests
    combined_id = " ".join(tests)

    try:
        command = ["pytest", "-q", *tests]
        try:
            measured = probe.measure(
                command, cwd=project_dir, env=env,
                timeout=config.test_timeout * max(len(tests), 1),
                repeats=config.repeats,
                variant=variant, test_id=combined_id,
            )
            counts = measured.counts or [0]
            if measured.passed:
                passed = {test_id: True for test_id in tests}
            else:
                passed = _attribute_failures(project_dir, env, tests,
                                             config.test_timeout)
        except MeasurementTimeoutError:
            log.warning("measurement of %s/%s timed out", bundle.task_id, variant)
            counts = [0]
            passed = _attribute_failures(project_dir, env, tests, config.test_timeout)
    finally:
        if not config.keep_workdir:
            shutil.rmtree(workdir, ignore_errors=True)

    if len(counts) < config.repeats:
        counts = counts + [counts[-1]] * (config.repeats - len(counts))
    counts = counts[: config.repeats]
    record = MeasurementRecord(
        task_id=bundle.task_id,
        variant=variant,
        instruction_count=int(statistics.median(counts)),
        backend=probe.backend,
        repeats=tuple(counts),
    )
    outcome = TestOutcome(task_id=bundle.task_id, variant=variant, passed=passed)
    return outcome, record


# --- metrics -------------------------------------------------------------------

def pass_at_1(outcomes: Iterable[TestOutcome]) -> float:
    """Fraction of tasks whose first solution passes every test."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptySetError("no outcomes to aggregate")
    return sum(1 for o in outcomes if o.pass_at_1) / len(outcomes)


def opt_rate(baseline_count: float, method_count: float) -> float:
    """(I_baseline - I_method) / I_baseline; positive means fewer instructions."""
    if baseline_count == 0:
        raise ZeroBaselineError("baseline instruction count is zero")
    if baseline_count < 0 or method_count < 0:
        raise ValueError("instruction counts cannot be negative")
    return (baseline_count - method_count) / baseline_count


def speedup(ground_truth_count: float, method_count: float) -> float:
    """gt / method; above 1.0 the method beats the human patch."""
    if method_count == 0:
        raise ZeroMethodCountError("method instruction count is zero")
    if ground_truth_count < 0 or method_count < 0:
        raise ValueError("instruction counts cannot be negative")
    return ground_truth_count / method_count


@dataclass
class EvalReport:
    tasks: dict = field(default_factory=dict)
    pass_at_1_rate: Optional[float] = None
    mean_opt_rate: Optional[float] = None
    mean_speedup: Optional[float] = None
    excluded: list = field(default_factory=list)
    backend: str = ""

    def to_json(self) -> dict:
        return {
            "tasks": self.tasks,
            "aggregates": {
                "pass_at_1": self.pass_at_1_rate,
                "mean_opt_rate": self.mean_opt_rate,
                "mean_speedup": self.mean_speedup,
            },
            "excluded": self.excluded,
            "backend": self.backend,
        }

    def summary_table(self) -> str:
        lines = [
            f"{'task':<28} {'pass@1':<8} {'opt rate':<10} {'speedup':<8}",
            "-" * 58,
        ]
        for task_id in sorted(self.tasks):
            row = self.tasks[task_id]
            opt = row.get("opt_rate")
            spd = row.get("speedup")
            lines.append(
                f"{task_id:<28} {str(row.get('pass_at_1', '-')):<8} "
                f"{f'{opt:+.3f}' if opt is not None else '-':<10} "
                f"{f'{spd:.3f}' if spd is not None else '-':<8}"
            )
        lines.append("-" * 58)
        lines.append(
            f"aggregate: pass@1={self.pass_at_1_rate if self.pass_at_1_rate is not None else '-'} "
            f"opt_rate={f'{self.mean_opt_rate:+.3f}' if self.mean_opt_rate is not None else '-'} "
            f"speedup={f'{self.mean_speedup:.3f}' if self.mean_speedup is not None else '-'}"
        )
        if self.excluded:
            lines.append(f"excluded from efficiency aggregates: {', '.join(self.excluded)}")
        return "\n".join(lines)


def aggregate(records: Iterable[MeasurementRecord],
              outcomes: Iterable[TestOutcome]) -> EvalReport:
    """Combine measurements and outcomes into the final report.

    Efficiency means cover only tasks passing correctness; a baseline variant
    must be present for the opt-rate aggregate; mixing probe backends in one
    aggregate is rejected.
    """
    records = list(records)
    outcomes = list(outcomes)
    backends = {r.backend for r in records}
    if len(backends) > 1:
        raise ValueError(f"cannot aggregate across probe backends: {sorted(backends)}")

    by_task: dict[str, dict[str, MeasurementRecord]] = {}
    for record in records:
        by_task.setdefault(record.task_id, {})[record.variant] = record
    if records and not any("baseline" in v for v in by_task.values()):
        raise MissingBaselineError("no baseline measurements present")

    method_outcomes = [o for o in outcomes if o.variant == "method"]
    report = EvalReport(backend=next(iter(backends), ""))
    report.pass_at_1_rate = pass_at_1(method_outcomes) if method_outcomes else None

    opt_rates, speedups = [], []
    for outcome in method_outcomes:
        row: dict = {"pass_at_1": outcome.pass_at_1, "tests": dict(outcome.passed)}
        variants = by_task.get(outcome.task_id, {})
        if not outcome.pass_at_1:
            report.excluded.append(outcome.task_id)
            row["excluded"] = True
        else:
            method = variants.get("method")
            base = variants.get("baseline")
            gt = variants.get("ground_truth")
            if method and base:
                row["opt_rate"] = opt_rate(base.instruction_count, method.instruction_count)
                opt_rates.append(row["opt_rate"])
            if method and gt:
                row["speedup"] = speedup(gt.instruction_count, method.instruction_count)
                speedups.append(row["speedup"])
        row["measurements"] = {v: r.to_json() for v, r in variants.items()}
        report.tasks[outcome.task_id] = row
    if opt_rates:
        report.mean_opt_rate = sum(opt_rates) / len(opt_rates)
    if speedups:
        report.mean_speedup = sum(speedups) / len(speedups)
    return report

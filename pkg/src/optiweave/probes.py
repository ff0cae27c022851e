"""Instruction-count probe runners used by the evaluation harness.

The production path shells out to the `instr-probe` executable and reads its
single-line JSON record from stdout. When the probe is not installed, a stub
runner still executes the test command for a real pass/fail verdict but
reports canned instruction counts, so the rest of the harness keeps working.
"""

from __future__ import annotations

import json
import logging
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    BackendUnavailableError,
    CommandNotFoundError,
    EnvSetupError,
    MeasurementTimeoutError,
)

log = logging.getLogger(__name__)

PROBE_EXECUTABLE = "instr-probe"
PROBE_SCHEMA = "instr-probe/1"


@dataclass
class ProbeOutcome:
    counts: list[int]  # one per repeat
    statuses: list[int]  # command exit status per repeat
    backend: str

    @property
    def passed(self) -> bool:
        return bool(self.statuses) and all(s == 0 for s in self.statuses)


class ProbeRunner:
    backend = "none"

    def measure(self, command: list[str], *, cwd: str, env: dict[str, str],
                timeout: float, repeats: int, variant: str = "",
                test_id: str = "") -> ProbeOutcome:
        raise NotImplementedError


class CommandProbe(ProbeRunner):
    """Runs the external instruction-count probe as a subprocess."""

    backend = "trace"

    def __init__(self, executable: str = PROBE_EXECUTABLE, backend: str = "trace",
                 scope: Optional[list[str]] = None, whole_process: bool = False):
        self.executable = executable
        self.backend = backend
        self.scope = scope
        self.whole_process = whole_process

    @staticmethod
    def available(executable: str = PROBE_EXECUTABLE) -> bool:
        return shutil.which(executable) is not None

    def measure(self, command, *, cwd, env, timeout, repeats, variant="", test_id=""):
        if not self.available(self.executable):
            raise BackendUnavailableError(f"{self.executable} not on PATH")
        argv = [self.executable, "--backend", self.backend, "--repeats", str(repeats)]
        for prefix in self.scope or []:
            argv += ["--scope", prefix]
        if self.whole_process:
            argv.append("--whole-process")
        argv += ["--", *command]
        try:
            proc = subprocess.run(
                argv, cwd=cwd, env=env, capture_output=True, text=True, timeout=timeout,
            )
        except subprocess.TimeoutExpired as err:
            raise MeasurementTimeoutError(
                f"probe exceeded {timeout}s for {test_id or command}"
            ) from err
        record = None
        for line in reversed(proc.stdout.splitlines()):
            line = line.strip()
            if line.startswith("{"):
                try:
                    record = json.loads(line)
                    break
                except json.JSONDecodeError:
                    continue
        if record is None or record.get("schema") != PROBE_SCHEMA:
            raise EnvSetupError(
                f"no probe record on stdout (exit {proc.returncode}): {proc.stderr[-500:]}"
            )
        if record.get("error"):
            code = record["error"].get("code", "")
            message = record["error"].get("message", "")
            if code == "COMMAND_NOT_FOUND":
                raise CommandNotFoundError(message)
            raise BackendUnavailableError(f"{code}: {message}")
        return ProbeOutcome(
            counts=[int(c) for c in record["counts"]],
            statuses=[int(s) for s in record["statuses"]],
            backend=str(record.get("backend", self.backend)),
        )


class StubProbe(ProbeRunner):
    """Canned measurements; the command still runs for its real verdict.

    Counts resolve by "<variant>:<test_id>", then by variant, then a default.
    """

    backend = "stub"

    def __init__(self, counts: Optional[dict] = None, default_count: int = 1000):
        self.counts = dict(counts or {})
        self.default_count = default_count

    def _count_for(self, variant: str, test_id: str) -> int:
        for key in (f"{variant}:{test_id}", variant, test_id):
            if key in self.counts:
                return int(self.counts[key])
        return self.default_count

    def measure(self, command, *, cwd, env, timeout, repeats, variant="", test_id=""):
        resolved = shutil.which(command[0], path=env.get("PATH"))
        in_process_pytest = command[0] in ("pytest", "py.test")
        if resolved is None and not in_process_pytest:
            raise CommandNotFoundError(f"{command[0]} not found")
        if in_process_pytest:
            # avoid PATH fragility: run pytest through the current interpreter
            command = [sys.executable, "-m", "pytest", *command[1:]]
        try:
            proc = subprocess.run(
                command, cwd=cwd, env=env, capture_output=True, timeout=timeout,
            )
            status = proc.returncode
        except subprocess.TimeoutExpired as err:
            raise MeasurementTimeoutError(f"command exceeded {timeout}s") from err
        count = self._count_for(variant, test_id)
        return ProbeOutcome(
            counts=[count] * repeats,
            statuses=[status] * repeats,
            backend=self.backend,
        )


@dataclass
class ProbeSelection:
    kind: str = "auto"  # "auto" | "command" | "stub"
    executable: str = PROBE_EXECUTABLE
    backend: str = "trace"
    scope: Optional[list[str]] = None
    whole_process: bool = False
    stub_counts: dict = field(default_factory=dict)
    stub_default_count: int = 1000


def select_probe(selection: Optional[ProbeSelection] = None) -> ProbeRunner:
    """Resolve the configured probe; auto falls back to the stub with a warning."""
    selection = selection or ProbeSelection()
    if selection.kind == "stub":
        return StubProbe(selection.stub_counts, selection.stub_default_count)
    if selection.kind == "command":
        if not CommandProbe.available(selection.executable):
            raise BackendUnavailableError(f"{selection.executable} not on PATH")
        return CommandProbe(selection.executable, selection.backend,
                            selection.scope, selection.whole_process)
    # auto
    if CommandProbe.available(selection.executable):
        return CommandProbe(selection.executable, selection.backend,
                            selection.scope, selection.whole_process)
    log.warning(
        "instruction-count probe %r not found; falling back to canned measurements",
        selection.executable,
    )
    return StubProbe(selection.stub_counts, selection.stub_default_count)

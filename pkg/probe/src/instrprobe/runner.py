"""In-process execution of the measured test command.

Supported command shapes run inside this interpreter so the tracer can see
them: `python script.py ...`, `python -m module ...`, `pytest ...`, and bare
`script.py`. Anything else cannot be traced in-process and is rejected.
"""

from __future__ import annotations

import io
import os
import runpy
import shutil
import sys
import traceback
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import dataclass

TAIL_CHARS = 4000

PYTHON_NAMES = ("python", "python3", os.path.basename(sys.executable))
PYTEST_NAMES = ("pytest", "py.test")


class CommandNotFound(Exception):
    pass


class NotTraceable(Exception):
    pass


@dataclass
class RunResult:
    status: int
    crashed: bool
    stdout_tail: str
    stderr_tail: str


def _looks_like_python(name: str) -> bool:
    base = os.path.basename(name)
    return base in PYTHON_NAMES or base.startswith("python3.")


def resolve(command: list[str]) -> list[str]:
    """Normalize the command or fail before any child process is spawned."""
    if not command:
        raise CommandNotFound("empty command")
    head = command[0]
    if _looks_like_python(head):
        if len(command) >= 3 and command[1] == "-m":
            return ["-m", command[2], *command[3:]]
        if len(command) >= 2:
            script = command[1]
            if not os.path.exists(script):
                raise CommandNotFound(f"script not found: {script}")
            return [os.path.abspath(script), *command[2:]]
        raise NotTraceable("bare interpreter REPL cannot be measured")
    if os.path.basename(head) in PYTEST_NAMES:
        return ["--pytest", *command[1:]]
    if head.endswith(".py"):
        if not os.path.exists(head):
            raise CommandNotFound(f"script not found: {head}")
        return [os.path.abspath(head), *command[1:]]
    if shutil.which(head) is None:
        raise CommandNotFound(f"{head} not found on PATH")
    raise NotTraceable(f"{head} is not a Python entry point; the trace backend "
                       "can only measure in-interpreter commands")


def execute(resolved: list[str]) -> RunResult:
    """Run the resolved command in-process, capturing output and exit status."""
    out_buf, err_buf = io.StringIO(), io.StringIO()
    status, crashed = 0, False
    saved_argv = sys.argv[:]
    try:
        with redirect_stdout(out_buf), redirect_stderr(err_buf):
            try:
                if resolved[0] == "--pytest":
                    import pytest

                    status = int(pytest.main(resolved[1:]))
                elif resolved[0] == "-m":
                    sys.argv = [resolved[1], *resolved[2:]]
                    runpy.run_module(resolved[1], run_name="__main__", alter_sys=True)
                else:
                    sys.argv = resolved[:]
                    runpy.run_path(resolved[0], run_name="__main__")
            except SystemExit as exc:
                code = exc.code
                status = code if isinstance(code, int) else (0 if code is None else 1)
            except BaseException:
                traceback.print_exc(file=err_buf)
                status, crashed = 1, True
    finally:
        sys.argv = saved_argv
    return RunResult(
        status=status,
        crashed=crashed,
        stdout_tail=out_buf.getvalue()[-TAIL_CHARS:],
        stderr_tail=err_buf.getvalue()[-TAIL_CHARS:],
    )

"""Probe command line.

The user-facing invocation orchestrates: it spawns one fresh child process
per repeat (imports and interpreter state never leak between repeats), reads
each child's result file, and prints a single-line JSON record on stdout.
The exit code mirrors the measured command's status; probe-internal failures
exit 125 with the error encoded in the record.

    instr-probe --backend trace --repeats 3 [--scope DIR ...] -- pytest -q test.py
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import tempfile

from . import runner, tracer
from .hardware import HardwareCounter

SCHEMA = "instr-probe/1"
PROBE_ERROR_EXIT = 125


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="instr-probe",
        description="Count executed interpreter instructions for a Python test command.",
    )
    parser.add_argument("--backend", choices=["trace", "hardware"], default="trace")
    parser.add_argument("--repeats", type=int, default=1)
    parser.add_argument("--scope", action="append", default=None,
                        help="Count only code under this path prefix (repeatable); "
                             "defaults to the working directory.")
    parser.add_argument("--whole-process", action="store_true",
                        help="Count every frame instead of scoping to the project.")
    parser.add_argument("--env", action="append", default=[], metavar="KEY=VALUE",
                        help="Environment override for the measured command.")
    parser.add_argument("--run-once", action="store_true", help=argparse.SUPPRESS)
    parser.add_argument("--result-file", default=None, help=argparse.SUPPRESS)
    parser.add_argument("command", nargs=argparse.REMAINDER,
                        help="Measured command after `--`.")
    return parser


def _strip_separator(command: list[str]) -> list[str]:
    return command[1:] if command and command[0] == "--" else command


def _emit(record: dict, exit_code: int) -> int:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()
    return exit_code


def _error_record(base: dict, code: str, message: str) -> dict:
    record = dict(base)
    record.update({"counts": [], "statuses": [], "status": PROBE_ERROR_EXIT,
                   "error": {"code": code, "message": message}})
    return record


def run_once(args: argparse.Namespace) -> int:
    """Child mode: measure in-process and write the result file."""
    command = _strip_separator(args.command)
    resolved = runner.resolve(command)
    scope = None if args.whole_process else (args.scope or [os.getcwd()])

    if resolved[0] == "--pytest" and not args.whole_process:
        # pre-import the test framework outside the traced region: its frames
        # are unscoped and never counted, but tracing them costs wall time
        import pytest  # noqa: F401

    if args.backend == "hardware":
        counter = HardwareCounter()
        with counter:
            result = runner.execute(resolved)
        counter.close()
        count = counter.count
    else:
        counter = tracer.OpcodeCounter(scope)
        with counter.active():
            result = runner.execute(resolved)
        count = counter.count

    payload = {
        "count": count,
        "status": result.status,
        "crashed": result.crashed,
        "stdout_tail": result.stdout_tail,
        "stderr_tail": result.stderr_tail,
    }
    with open(args.result_file, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return result.status


def orchestrate(args: argparse.Namespace) -> int:
    """Parent mode: one fresh child process per repeat, then aggregate."""
    command = _strip_separator(args.command)
    base = {
        "schema": SCHEMA,
        "backend": args.backend,
        "command": command,
        "repeats": args.repeats,
        "scope": args.scope or ([] if args.whole_process else [os.getcwd()]),
        "whole_process": args.whole_process,
        "error": None,
    }
    if args.repeats < 1:
        return _emit(_error_record(base, "BAD_REQUEST", "repeats must be >= 1"),
                     PROBE_ERROR_EXIT)
    try:
        runner.resolve(command)
    except runner.CommandNotFound as err:
        return _emit(_error_record(base, "COMMAND_NOT_FOUND", str(err)), PROBE_ERROR_EXIT)
    except runner.NotTraceable as err:
        return _emit(_error_record(base, "BACKEND_UNAVAILABLE", str(err)), PROBE_ERROR_EXIT)
    if args.backend == "hardware" and not HardwareCounter.available():
        return _emit(_error_record(base, "BACKEND_UNAVAILABLE",
                                   "hardware counters not accessible"), PROBE_ERROR_EXIT)

    env = dict(os.environ)
    env.setdefault("PYTHONHASHSEED", "0")
    env["PYTHONDONTWRITEBYTECODE"] = "1"
    for override in args.env:
        key, _, value = override.partition("=")
        env[key] = value

    counts: list[int] = []
    statuses: list[int] = []
    crashed = False
    tails = {"stdout": "", "stderr": ""}
    child_argv = [sys.executable, "-m", "instrprobe", "--backend", args.backend,
                  "--repeats", "1", "--run-once"]
    for prefix in args.scope or []:
        child_argv += ["--scope", prefix]
    if args.whole_process:
        child_argv.append("--whole-process")

    for _ in range(args.repeats):
        with tempfile.NamedTemporaryFile(mode="r", suffix=".json", delete=False) as tmp:
            result_path = tmp.name
        try:
            proc = subprocess.run(
                [*child_argv, "--result-file", result_path, "--", *command],
                capture_output=True, text=True, env=env,
            )
            try:
                with open(result_path, "r", encoding="utf-8") as fh:
                    payload = json.load(fh)
            except (OSError, json.JSONDecodeError):
                message = (proc.stderr or proc.stdout or "")[-1000:]
                return _emit(_error_record(base, "PROBE_CRASH",
                                           f"child produced no result: {message}"),
                             PROBE_ERROR_EXIT)
        finally:
            if os.path.exists(result_path):
                os.unlink(result_path)
        counts.append(int(payload["count"]))
        statuses.append(int(payload["status"]))
        crashed = crashed or bool(payload.get("crashed"))
        tails = {"stdout": payload.get("stdout_tail", ""),
                 "stderr": payload.get("stderr_tail", "")}

    status = max(statuses)
    record = dict(base)
    record.update({
        "counts": counts,
        "statuses": statuses,
        "status": status,
        "crashed": crashed,
        "median_count": int(statistics.median(counts)),
        "output_tail": tails,
    })
    return _emit(record, status)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not _strip_separator(args.command):
        build_parser().error("no command given after --")
    if args.run_once:
        if not args.result_file:
            build_parser().error("--run-once requires --result-file")
        return run_once(args)
    return orchestrate(args)


if __name__ == "__main__":
    sys.exit(main())

"""Scope-filtered interpreter instruction counting.

Counts executed bytecode instructions by enabling per-opcode trace events on
frames whose code lives under the configured path prefixes. Frames outside
the scope produce no events at all, so interpreter and test-framework
machinery stays out of the count. Counting is per-thread: the measured
region is expected to be single-threaded.
"""

from __future__ import annotations

import os
import sys
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence

_PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))


class OpcodeCounter:
    """Counts opcode events in frames matching the scope prefixes.

    A scope of None counts every real frame (whole-process mode) except the
    probe's own code. Pseudo-filenames such as "<string>" are only counted in
    whole-process mode.
    """

    def __init__(self, scope: Optional[Sequence[str]] = None):
        self.count = 0
        if scope is None:
            self._scope: Optional[tuple[str, ...]] = None
        else:
            self._scope = tuple(os.path.abspath(p) for p in scope)
        self._decision_cache: dict[str, bool] = {}

    def _in_scope(self, filename: str) -> bool:
        cached = self._decision_cache.get(filename)
        if cached is not None:
            return cached
        if filename.startswith("<"):
            decision = self._scope is None
        else:
            abspath = filename if os.path.isabs(filename) else os.path.abspath(filename)
            if abspath.startswith(_PACKAGE_DIR):
                decision = False  # never count the probe itself
            elif self._scope is None:
                decision = True
            else:
                decision = any(
                    abspath == p or abspath.startswith(p + os.sep) for p in self._scope
                )
        self._decision_cache[filename] = decision
        return decision

    def _trace(self, frame, event, arg):
        if event == "opcode":
            self.count += 1
            return self._trace
        if event == "call":
            if self._in_scope(frame.f_code.co_filename):
                frame.f_trace_opcodes = True
                return self._trace
            return None
        return self._trace

    @contextmanager
    def active(self) -> Iterator["OpcodeCounter"]:
        previous = sys.gettrace()
        sys.settrace(self._trace)
        try:
            yield self
        finally:
            sys.settrace(previous)

"""Retired-instruction hardware counter via perf_event_open (Linux only).

Best effort: many environments (containers, locked-down kernels) refuse the
syscall, in which case the backend reports itself unavailable and callers
fall back to the trace backend explicitly.
"""

from __future__ import annotations

import ctypes
import os
import platform
import struct

PERF_TYPE_HARDWARE = 0
PERF_COUNT_HW_INSTRUCTIONS = 1
_ATTR_SIZE = 112

_SYSCALL_NR = {
    "x86_64": 298,
    "aarch64": 241,
    "arm64": 241,
}


class HardwareUnavailable(Exception):
    pass


def _perf_event_open() -> int:
    nr = _SYSCALL_NR.get(platform.machine())
    if nr is None or not hasattr(os, "getpid") or os.name != "posix":
        raise HardwareUnavailable(f"unsupported platform {platform.machine()}")
    libc = ctypes.CDLL(None, use_errno=True)
    # perf_event_attr: type, size, config, then flag/config words we leave zeroed
    # except exclude_kernel|exclude_hv and the disabled bit.
    attr = bytearray(_ATTR_SIZE)
    struct.pack_into("IIQ", attr, 0, PERF_TYPE_HARDWARE, _ATTR_SIZE,
                     PERF_COUNT_HW_INSTRUCTIONS)
    # bitfield word at offset 40: disabled(1) | exclude_kernel(5) | exclude_hv(6)
    flags = (1 << 0) | (1 << 5) | (1 << 6)
    struct.pack_into("Q", attr, 40, flags)
    buf = (ctypes.c_char * _ATTR_SIZE).from_buffer(attr)
    fd = libc.syscall(nr, ctypes.byref(buf), 0, -1, -1, 0)
    if fd < 0:
        err = ctypes.get_errno()
        raise HardwareUnavailable(f"perf_event_open failed: errno {err}")
    return fd


_ENABLE = 0x2400  # PERF_EVENT_IOC_ENABLE
_DISABLE = 0x2401  # PERF_EVENT_IOC_DISABLE
_RESET = 0x2403  # PERF_EVENT_IOC_RESET


class HardwareCounter:
    """Counts retired instructions for this process around a region."""

    def __init__(self):
        self._fd = _perf_event_open()
        self.count = 0

    @staticmethod
    def available() -> bool:
        try:
            counter = HardwareCounter()
        except HardwareUnavailable:
            return False
        counter.close()
        return True

    def __enter__(self):
        import fcntl

        fcntl.ioctl(self._fd, _RESET, 0)
        fcntl.ioctl(self._fd, _ENABLE, 0)
        return self

    def __exit__(self, *exc):
        import fcntl

        fcntl.ioctl(self._fd, _DISABLE, 0)
        self.count = struct.unpack("q", os.read(self._fd, 8))[0]
        return False

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

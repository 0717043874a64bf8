"""Process-level tuning for long numpy workloads."""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_tuned = False


def tune_allocator() -> bool:
    """Keep freed heap memory for reuse instead of returning it to the OS.

    Training allocates and frees the same few-megabyte activations every step;
    with glibc's defaults each one is a fresh ``mmap`` whose pages fault in
    again, which costs ~15% of a step on one core.  No-op off glibc.
    """
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = all((
        mallopt(_M_MMAP_THRESHOLD, 1 << 30),
        mallopt(_M_TRIM_THRESHOLD, 1 << 30),
        mallopt(_M_TOP_PAD, 256 << 20),
    ))
    _tuned = bool(ok)
    return _tuned

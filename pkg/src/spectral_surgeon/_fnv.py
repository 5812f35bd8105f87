"""64-bit FNV-1a hashing with a compiled kernel when available.

The hash is sequential per byte, so the pure-Python loop is the only part of
the package where CPython overhead dominates. At import we pick the Cython
kernel if it was built; set SPECTRAL_SURGEON_NO_EXT=1 to force the fallback
(used by the benchmark and the equivalence test).
"""

from __future__ import annotations

import os

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a_update_py(h: int, data: bytes) -> int:
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


if os.environ.get("SPECTRAL_SURGEON_NO_EXT"):
    _fnv1a_update = _fnv1a_update_py
    USING_NATIVE = False
else:
    try:
        from spectral_surgeon._fnv_native import fnv1a_update as _fnv1a_update

        USING_NATIVE = True
    except ImportError:
        _fnv1a_update = _fnv1a_update_py
        USING_NATIVE = False


def fnv1a(data: bytes, h: int = FNV64_OFFSET) -> int:
    """Hash `data`, continuing from state `h`. Chain calls to hash a stream."""
    return int(_fnv1a_update(h, data))


def fnv1a_str(text: str) -> int:
    return fnv1a(text.encode("utf-8"))

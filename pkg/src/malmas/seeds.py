"""Deterministic seed derivation.

Sub-seeds are derived by hashing string parts with sha256 and XOR-ing the
leading 8 bytes into the base seed. Python's builtin hash() is salted per
process and must never be used for this; sha256 keeps derived seeds identical
across processes and platforms.
"""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *parts) -> int:
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return (int(base) ^ int.from_bytes(digest[:8], "big")) & 0x7FFFFFFFFFFFFFFF

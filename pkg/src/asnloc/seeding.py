"""Deterministic RNG derivation.

Every random draw in the package flows from one user-supplied 64-bit base
seed.  Sub-streams are derived as

    SeedSequence(base_seed, spawn_key=blake2b(path parts))

where the path is a tuple of ints/floats/strings naming the consumer
(e.g. ("trial", t60, shift, trial_id, "noise")).  Floats are keyed by
their IEEE-754 bit pattern, so the derivation is exact and portable.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def _encode(part: int | float | str | bytes) -> bytes:
    if isinstance(part, bool):  # bool is an int subclass; keep it distinct
        return b"b" + (b"1" if part else b"0")
    if isinstance(part, int):
        return b"i" + part.to_bytes(16, "little", signed=True)
    if isinstance(part, float):
        return b"f" + struct.pack("<d", part)
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    if isinstance(part, bytes):
        return b"y" + part
    raise TypeError(f"unsupported seed path part: {part!r}")


def derive_seed(base_seed: int, *path: int | float | str | bytes) -> int:
    """Collapse (base_seed, *path) into a stable 64-bit stream seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(_encode(int(base_seed)))
    for part in path:
        h.update(_encode(part))
    return int.from_bytes(h.digest(), "little")


def rng_for(base_seed: int, *path: int | float | str | bytes) -> np.random.Generator:
    """Generator for the sub-stream named by `path` under `base_seed`."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(base_seed, *path)))

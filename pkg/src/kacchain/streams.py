"""Reproducible random streams.

A single 64-bit master seed labels every source of randomness in a run.
Named substreams (and indexed replica streams) are derived by hashing the
master seed together with a label, and the hash keys a counter-based
Philox generator.  Streams with distinct labels are statistically
independent, and a stream's output does not depend on how many other
streams exist or in which order they are consumed, which is what makes
parallel replicas reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "stream", "replica_stream"]


def derive_key(master_seed: int, label: str) -> tuple[int, int]:
    """Hash (master_seed, label) into a 128-bit Philox key."""
    digest = hashlib.sha256(f"{master_seed:#x}:{label}".encode()).digest()
    lo = int.from_bytes(digest[:8], "little")
    hi = int.from_bytes(digest[8:16], "little")
    return lo, hi


def stream(master_seed: int, label: str) -> np.random.Generator:
    """Independent generator for the given label."""
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, label)))


def replica_stream(master_seed: int, label: str, replica: int) -> np.random.Generator:
    """Generator for replica ``replica`` of a named experiment."""
    return stream(master_seed, f"{label}/replica-{replica}")

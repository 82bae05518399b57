"""Deterministic seed derivation.

All randomness in a run flows from one master seed; sub-streams are derived
by hashing (master, role, index) so results never depend on evaluation order
or thread count.
"""

import hashlib

import numpy as np


def derive_seed(master: int, role: str, index: int = 0) -> int:
    """Stable 63-bit sub-seed for a named random stream."""
    payload = f"{master}/{role}/{index}".encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(master: int, role: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, role, index))

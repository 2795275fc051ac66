"""Deterministic seed derivation: one master seed fans out to named streams."""

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    """64-bit seed for the stream `label`, stable across platforms."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))

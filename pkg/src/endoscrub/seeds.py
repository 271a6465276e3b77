"""Seed derivation.

One global seed fans out to per-purpose streams so that, e.g., fold
splitting and augmentation stay independently reproducible. Derivation is
sha256 over "<seed>:<tag>", truncated to 63 bits (fits torch and numpy
seed ranges).
"""

import hashlib

import numpy as np


def derive_seed(global_seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_for(global_seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, tag))

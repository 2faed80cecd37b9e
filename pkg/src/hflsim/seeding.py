"""Labeled seed derivation.

A single master seed fans out into independent named streams (data
generation, architecture draws, client sampling, training) so that any
component can be reproduced in isolation. Derivation is a SHA-256 hash of
``"{master}:{label}"``, stable across platforms and processes.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEED_SPACE = 2**63


def derive_seed(master: int, label: str) -> int:
    """Map (master, label) to a sub-seed, deterministically."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % _SEED_SPACE


def rng_for(master: int, label: str) -> np.random.Generator:
    """A fresh generator on the named stream."""
    return np.random.default_rng(derive_seed(master, label))

"""Deterministic, labeled random streams.

All randomness in an experiment flows from one root seed; each phase
("teacher", "generation", "student", "eval", ...) derives its own
independent stream by hashing the label into the seed material. Paired
runs that share a root seed therefore share streams phase by phase.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root_seed: int, *labels: str) -> np.random.Generator:
    """Generator for the stream named by `labels` under `root_seed`."""
    keys = [root_seed] + [_label_key(l) for l in labels]
    return np.random.default_rng(np.random.SeedSequence(keys))


def derive_seed(root_seed: int, *labels: str) -> int:
    """Stable 63-bit integer seed for the stream named by `labels`."""
    keys = [root_seed] + [_label_key(l) for l in labels]
    return int(np.random.SeedSequence(keys).generate_state(1, np.uint64)[0] >> 1)

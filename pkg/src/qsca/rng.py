"""Deterministic random stream derivation.

Every random draw in the library flows from a single master seed. A stream
is addressed by a path of labels (purpose tags) and integers (attack index,
layer index, parameter coordinate), so any target's stream can be rebuilt in
isolation, in any order, on any number of workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def _label_code(label: str) -> int:
    # Stable across platforms and processes (unlike hash()).
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed: int, *path: int | str) -> np.random.Generator:
    """Return a Generator for the stream addressed by ``path`` under the seed.

    Components may be non-negative integers or string tags; distinct paths
    yield statistically independent streams, and the same path always yields
    the same stream.
    """
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    entropy = [master_seed & _U64]
    for part in path:
        if isinstance(part, str):
            entropy.append(_label_code(part))
        else:
            code = int(part)
            if code < 0:
                raise ValueError(f"negative path component: {part!r}")
            entropy.append(code & _U64)
    return np.random.default_rng(np.random.SeedSequence(entropy))

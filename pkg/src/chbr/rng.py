"""Named deterministic random substreams.

One 64-bit run seed fans out into independent generators keyed by string/int
labels (e.g. ("sampler", class_id, 3)), so components draw reproducibly and
independently of each other's call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the substream named by `labels` under `seed`."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_to_int(x) for x in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))

"""Counter-based random streams.

Every stream is a Philox generator whose 128-bit key is derived from
(seed, *labels) alone, so a block of samples depends only on its own
labels and never on how work is scheduled across threads.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode())


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_label_int(x) for x in labels))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

"""Named, seeded random streams on a counter-based generator (Philox)."""

import hashlib
import os

import numpy as np

STREAMS = ("noise", "init", "dropout", "data", "probe")

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``(seed, name)``.

    The Philox key packs the seed into the high word and a hash of the stream
    name into the low word, so streams never overlap and are replayable.
    """
    key = ((int(seed) & _MASK64) << 64) | _name_key(name)
    return np.random.Generator(np.random.Philox(key=key))


def default_seed(fallback: int = 0) -> int:
    value = os.environ.get("ZOOMSTACK_SEED")
    return int(value) if value not in (None, "") else fallback

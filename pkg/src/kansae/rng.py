"""Named random streams derived from a single experiment seed.

Every consumer of randomness asks for its own stream by name. The stream seed is
``seed XOR h(name)`` where ``h`` is the first 8 bytes of SHA-256 of the UTF-8
name read as a little-endian u64, so streams are independent of call order.
"""

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def stream_seed(seed: int, name: str) -> int:
    h = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return (int(seed) & _U64) ^ h


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))

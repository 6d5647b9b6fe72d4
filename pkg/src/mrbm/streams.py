"""Deterministic random streams.

Every stream is a PCG64 generator seeded by ``SeedSequence([seed, *keys])``.
String keys are mapped to integers with CRC-32, so ``stream(7, "forward", 3)``
always yields the same sequence on every platform.
"""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)] + [_key(k) for k in keys])))


def chain_stream(seed: int, chain_index: int) -> np.random.Generator:
    """Stream for chain ``chain_index`` of a batch seeded with ``seed``."""
    return stream(seed, "chain", chain_index)

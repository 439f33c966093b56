"""Named random streams fanned out from one integer seed.

Each consumer asks for its own stream by name, so adding a new consumer
never shifts the numbers another one sees.
"""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))

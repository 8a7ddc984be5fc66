"""Counter-based, splittable random streams.

Draws depend only on ``(seed, stream, counter)``: the stream path is folded
into a Philox key and the counter is advanced explicitly, so a layer or a
training step always sees the same numbers no matter how many other streams
were consumed before it.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def _stream_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError("stream ids must be non-negative")
    return value


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: tuple = ()
    counter: int = 0

    def split(self, *ids) -> RngStream:
        """Child stream; ``ids`` may be ints or strings."""
        return RngStream(self.seed, self.stream + tuple(_stream_word(i) for i in ids), 0)

    def advance(self, n: int) -> RngStream:
        return RngStream(self.seed, self.stream, self.counter + int(n))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream)
        key = ss.generate_state(2, dtype=np.uint64)
        bitgen = np.random.Philox(key=key)
        if self.counter:
            bitgen.advance(self.counter)
        return np.random.Generator(bitgen)

    def normal(self, shape, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.generator().standard_normal(shape) * scale).astype(dtype, copy=False)

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator().random(shape).astype(dtype, copy=False)

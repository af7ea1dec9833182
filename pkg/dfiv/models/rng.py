"""
Counter-based random streams.

A stream is a Philox generator keyed by ``(seed, stream_id)``; the same pair
replays the same sequence on every platform, and distinct stream ids give
independent streams. A stream is single-owner: split it rather than share it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_U64 = (1 << 64) - 1


def _hash_to_u64(text: str) -> int:
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    _generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (0 <= self.seed <= _U64 and 0 <= self.stream_id <= _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._generator = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def split(self, name: str | int) -> "RngStream":
        """Child stream derived from this stream's key and a name; never shares state."""
        child_id = _hash_to_u64(f"{self.stream_id}:{name}")
        return RngStream(self.seed, child_id)

    def reset(self) -> None:
        """Rewind to the start of the sequence."""
        self.__post_init__()

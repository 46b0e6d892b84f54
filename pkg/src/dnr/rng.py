"""Seeded random streams built on the counter-based Philox generator."""

from __future__ import annotations

import hashlib

import numpy as np

from dnr.errors import ContractViolation
from dnr.tensor import Tensor

_MASK64 = (1 << 64) - 1


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed & _MASK64).to_bytes(8, "little"))
    for label in path:
        h.update(b"\x00")
        h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Reproducible random stream identified by a seed and a fork path.

    Children created with :meth:`fork` get a Philox key hashed from the
    parent's seed and the full label path, so the same labels always give
    the same child stream no matter how much the parent has been consumed.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        if seed < 0:
            raise ContractViolation("seed must be a non-negative integer")
        self.seed = int(seed) & _MASK64
        self.path = _path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, _path)))

    @property
    def counter(self) -> int:
        state = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(word) << (64 * i) for i, word in enumerate(state)))

    def fork(self, label: str) -> RngStream:
        return RngStream(self.seed, self.path + (str(label),))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ContractViolation(f"std must be non-negative, got {std}")
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        if std == 0:
            return np.full(shape, float(mean))
        return mean + std * self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def bits(self, shape) -> np.ndarray:
        return self._gen.integers(0, 2, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def gaussian_sample(rng: RngStream, shape, mean: float = 0.0, std: float = 1.0):
    """I.i.d. normal draws wrapped as an untracked tensor."""
    return Tensor(rng.normal(shape, mean, std))

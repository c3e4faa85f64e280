"""Deterministic random numbers with an explicit, documented algorithm.

All randomness in the package flows through `Rng`, which is specified tightly
enough to reproduce streams in another language:

- Bit source: Philox4x64-10 counter-based generator, keyed by
  (seed, stream_id), counter starting at zero, consumed word by word
  (numpy's `Philox` bit generator with ``key=[seed, stream_id]``).
- Uniforms: u = (raw_uint64 >> 11) * 2**-53, giving doubles in [0, 1).
- Normals: Box–Muller on consecutive uniform pairs (u1, u2):
      r = sqrt(-2 ln(1 - u1)),  z1 = r cos(2π u2),  z2 = r sin(2π u2)
  For an odd request the trailing z2 is discarded.
- Derived streams: stream_id = FNV-1a 64-bit hash of a label string, so
  per-purpose streams ("init", "data", ...) are independent and stable.
"""

from __future__ import annotations

import math

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(label: str) -> int:
    """FNV-1a 64-bit hash of a UTF-8 string (stable across platforms)."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    def __init__(self, seed: int, stream: int | str = 0):
        if isinstance(stream, str):
            stream = fnv1a64(stream)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def derive(self, label: str) -> "Rng":
        """Independent stream for a named purpose under the same seed."""
        return Rng(self.seed, fnv1a64(label) ^ self.stream)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        u = (self.raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n] * std
        return z.reshape(shape) if shape else float(z[0])

    def truncated_normal(self, shape, std: float = 1.0, cutoff: float = 3.0) -> np.ndarray:
        """Normal(0, std) with |z| > cutoff·std resampled (flattened order)."""
        z = self.normal(shape).reshape(-1)
        bad = np.abs(z) > cutoff
        while np.any(bad):
            z[bad] = self.normal((int(bad.sum()),))
            bad = np.abs(z) > cutoff
        return (z * std).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high) as floor(low + u·(high−low))."""
        u = self.uniform(shape if shape else (1,))
        out = np.floor(low + u * (high - low)).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def choice_index(self, n: int) -> int:
        return self.integers(0, n)

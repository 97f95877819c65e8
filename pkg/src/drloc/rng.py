"""Deterministic counter-based random streams.

Every stochastic choice in the package (weight init, data order,
augmentation, pair sampling, synthetic data) draws from a `Stream`.  A
stream is a SplitMix64-style generator driven by an explicit 64-bit
counter: output ``i`` is ``mix64(key + (i+1)*GOLDEN)``.  Because draws
are a pure function of (key, counter) the sequence is bit-identical
across runs and platforms, and blocks of any size can be produced with
vectorized uint64 arithmetic.

Independent sub-streams are derived by hashing a string label into the
parent key, so e.g. the pretext sampler can consume randomness without
perturbing the stream that orders the training data.

Integers in a range use threshold rejection (no modulo bias); normal
deviates use Box-Muller on fresh uniforms.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MAX = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wraps mod 2**64)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _label_hash(label: str) -> int:
    """FNV-1a 64-bit hash of a stream label."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class Stream:
    """One deterministic random stream, identified by a 64-bit key."""

    def __init__(self, key: int):
        self.key = np.uint64(key & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def child(self, label: str) -> "Stream":
        """Derive an independent stream; does not consume from this one."""
        with np.errstate(over="ignore"):
            mixed = _mix64(np.uint64(_label_hash(label)) ^ (self.key * _GOLDEN))
        return Stream(int(mixed))

    def raw(self, count: int) -> np.ndarray:
        """Next `count` raw uint64 words."""
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        return _mix64(self.key + idx * _GOLDEN)

    def uniform(self, count: int) -> np.ndarray:
        """float64 array of `count` uniforms in [0, 1)."""
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def integers(self, upper: int, count: int) -> np.ndarray:
        """int64 array of `count` uniform draws from {0, ..., upper-1}.

        Rejection sampling: raw words >= floor(2**64 / upper) * upper are
        discarded, so the modulo of accepted words is exactly uniform.
        """
        if upper <= 0:
            raise ValueError(f"integers() needs upper >= 1, got {upper}")
        u = np.uint64(upper)
        threshold = (_U64_MAX // u) * u  # accept raw < threshold
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            block = self.raw(count - filled)
            accepted = block[block < threshold]
            take = accepted[: count - filled]
            out[filled : filled + take.size] = (take % u).astype(np.int64)
            filled += take.size
        return out

    def normal(self, count: int, sigma: float = 1.0) -> np.ndarray:
        """float64 array of `count` N(0, sigma^2) deviates (Box-Muller)."""
        pairs = (count + 1) // 2
        u1 = (self.raw(pairs).astype(np.float64) + 1.0) * (2.0 ** -64)  # (0, 1]
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return sigma * z

    def permutation(self, count: int) -> np.ndarray:
        """Deterministic permutation of range(count) via argsort of uniforms."""
        return np.argsort(self.uniform(count), kind="stable")

    def coin_flips(self, count: int) -> np.ndarray:
        """Boolean array; each entry true with probability 1/2."""
        return self.uniform(count) < 0.5


def root_stream(seed: int) -> Stream:
    """Stream for a root experiment seed; sub-streams come from .child()."""
    with np.errstate(over="ignore"):
        key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + _GOLDEN)
    return Stream(int(key))

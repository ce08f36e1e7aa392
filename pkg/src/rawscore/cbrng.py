"""Counter-based deterministic random numbers (splitmix64 hashing).

Every random value is a pure function of (seed, stream id, counter), so
replicate generation and dithering are reproducible regardless of worker
count, chunking, or evaluation order. The same integer arithmetic runs in
the numba kernels (`rawscore.kernels_numba`), and uint64 wraparound makes
the two backends bit-identical.

Streams partition the key space: stream 0..N-1 are synthesis replicates,
DITHER_STREAM is the codec dither plane. Derive further sub-seeds with
`derive_seed` instead of reusing a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

DITHER_STREAM = 0xD17E4


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):  # wraparound is the point
        z = (z + GAMMA).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def stream_key(seed: int, stream: int) -> np.uint64:
    """64-bit key for one (seed, stream) pair."""
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    t = np.uint64(stream & 0xFFFFFFFFFFFFFFFF)
    return np.uint64(mix64(np.asarray(mix64(np.asarray(s)) ^ t)))


def hash_u64(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    """Hash counters under a key; output is the raw uint64 stream."""
    with np.errstate(over="ignore"):
        return mix64(np.uint64(key) + counters.astype(np.uint64) * GAMMA)


def uniforms(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    """U(0,1) doubles, strictly inside the open interval."""
    bits = hash_u64(key, counters)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(key: np.uint64, index: np.ndarray) -> np.ndarray:
    """One standard normal per index via Box-Muller (cos branch).

    Uses counters 2*index and 2*index+1, so indices are independent and
    any subset can be evaluated in any order.
    """
    idx = index.astype(np.uint64)
    u1 = uniforms(key, idx * np.uint64(2))
    u2 = uniforms(key, idx * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit sub-seed for a named pipeline stage."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF

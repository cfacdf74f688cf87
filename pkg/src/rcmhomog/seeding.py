"""Counter-based hashing used for every random draw in the package.

Each draw is a pure function of ``(key, counter)``: the key is derived from a
master seed (and optional stream labels), the counter is the canonical id of
the edge or site.  Values therefore do not depend on enumeration order or on
how work is split between threads.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(*labels):
    """Fold integer labels into one 64-bit seed, e.g. ``derive_seed(master, N, i)``."""
    h = np.array([0x243F6A8885A308D3], dtype=np.uint64)
    for lab in labels:
        v = np.array([int(lab) & _MASK], dtype=np.uint64)
        with np.errstate(over="ignore"):
            h = mix64(h ^ mix64(v + _GOLDEN))
    return int(h[0])


def counter_bits(key, counters):
    """64 random bits per counter: the SplitMix64 output at position ``counter``."""
    k = np.array([int(key) & _MASK], dtype=np.uint64)
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(mix64(k) + (c + np.uint64(1)) * _GOLDEN)


def counter_uniforms(key, counters):
    """Uniform draws on (0, 1] with 53-bit resolution, one per counter."""
    bits = counter_bits(key, counters)
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def point_counters(coords):
    """Hash integer lattice points of Z^d (array ``(..., d)``) into uint64 counters.

    Used for fields defined on the whole lattice (potentials), so that the
    value at a point is the same whichever finite box it is sampled in.
    """
    coords = np.asarray(coords, dtype=np.int64)
    # zigzag keeps negative coordinates distinct
    zz = ((coords << 1) ^ (coords >> 63)).astype(np.uint64)
    h = np.full(coords.shape[:-1], 0x1F83D9ABFB41BD6B, dtype=np.uint64)
    for j in range(coords.shape[-1]):
        with np.errstate(over="ignore"):
            h = mix64(h ^ (zz[..., j] + _GOLDEN * np.uint64(j + 1)))
    return h

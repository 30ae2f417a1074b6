"""Counter-based random numbers.

Every draw is a pure function of ``(seed, stream, counter)`` so any single
entry (e.g. one random Fourier frequency) can be regenerated without
touching the others.
"""
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 1.0 / 9007199254740992.0


def _mix(z):
    # splitmix64 finalizer
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


_MASK = 0xFFFFFFFFFFFFFFFF


def _mix_int(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def key(*parts):
    """Fold integers into a single 64-bit key."""
    h = 0
    for p in parts:
        h = _mix_int((h * 0x9E3779B97F4A7C15 + (int(p) & _MASK)) & _MASK)
    return h


def hash64(k, counters):
    """64-bit hashes of ``counters`` under key ``k``."""
    # array-valued uint64 arithmetic wraps silently
    c = np.atleast_1d(np.asarray(counters, dtype=np.uint64))
    kk = np.uint64(k)
    return _mix(_mix(c * _GOLDEN + kk) ^ kk)


def uniform(k, counters):
    """Uniform draws on the open interval (0, 1)."""
    h = hash64(k, counters)
    return ((h >> _S11).astype(np.float64) + 0.5) * _TWO53


def normal(k, counters):
    """Standard normal draws (Box-Muller on two independent uniforms)."""
    c = np.atleast_1d(np.asarray(counters, dtype=np.uint64))
    u1 = uniform(k, c * np.uint64(2))
    u2 = uniform(k, c * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def integers(k, high, size):
    """``size`` draws uniform over ``{0, ..., high-1}`` (with replacement)."""
    h = hash64(k, np.arange(size, dtype=np.uint64))
    return (h % np.uint64(high)).astype(np.int64)

"""Seedable counter-based random number generation.

All randomness in the package flows through :class:`CounterRng`, a
SplitMix64 counter stream with a Box-Muller Gaussian transform. Each
output depends only on (seed, counter), so streams reproduce exactly
across runs and platforms (up to libm rounding of log/cos/sqrt) and
sub-streams can be derived for parallel work without coordination.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x):
    """SplitMix64 finalizer: uint64 array/scalar -> decorrelated uint64."""
    z = x
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed, start, count):
    """Words ``start .. start+count-1`` of the SplitMix64 stream for ``seed``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(seed) + idx * _GOLDEN)


class CounterRng:
    """Deterministic generator over the SplitMix64 counter stream.

    The generator keeps a position counter; every draw advances it by the
    number of 64-bit words consumed, so a sequence of calls is equivalent
    to slicing one fixed stream.
    """

    def __init__(self, seed, position=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = int(position)

    def _words(self, count):
        w = splitmix64(self.seed, self.position, count)
        self.position += count
        return w

    def uniform(self, shape=()):
        """Doubles in (0, 1], one word each (top 53 bits)."""
        count = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        w = self._words(count)
        u = ((w >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        return u.reshape(shape) if shape != () else float(u[0])

    def normal(self, shape=()):
        """Standard normals via Box-Muller over consecutive word pairs."""
        count = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        pairs = (count + 1) // 2
        w = self._words(2 * pairs)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        g = np.empty(2 * pairs)
        g[0::2] = r * np.cos(ang)
        g[1::2] = r * np.sin(ang)
        g = g[:count]
        return g.reshape(shape) if shape != () else float(g[0])

    def integers(self, low, high, shape=()):
        """Uniform ints in [low, high). Modulo bias is < 2^-40 for our ranges."""
        count = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        span = np.uint64(high - low)
        w = self._words(count) % span
        out = w.astype(np.int64) + low
        return out.reshape(shape) if shape != () else int(out[0])

    def shuffled(self, n):
        """A permutation of range(n) by sorting one block of random words."""
        return np.argsort(self._words(n), kind="stable")

    def derive(self, tag):
        """Independent child stream for e.g. a patch id or an epoch index."""
        with np.errstate(over="ignore"):
            child = _mix(np.uint64(self.seed) ^ _mix(np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
        return CounterRng(int(child))

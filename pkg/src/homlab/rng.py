"""Counter-based random numbers (Threefry-2x32, 20 rounds).

Normals are produced by inverting the normal CDF at 32-bit uniforms, which
bounds them by about 6.2 in absolute value.

Every random draw in the package is a pure function of ``(key, counter)``, so
results never depend on how paths are batched, ordered or split across
workers.  Keys are derived hierarchically from a 64-bit master seed with
:func:`derive_key`.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

MASK32 = 0xFFFFFFFF
_PARITY = 0x1BD11BDA

# purpose tags used with derive_key
TAG_ENV = 1
TAG_SHIFT = 2
TAG_PATH = 3
TAG_COUPLE = 4
TAG_SELECT = 5
TAG_CLOUD = 6


@nb.njit(cache=True, inline="always")
def _rotl(x, r):
    return ((x << np.uint64(r)) | (x >> np.uint64(32 - r))) & np.uint64(MASK32)


@nb.njit(cache=True, inline="always")
def _mix(x0, x1, r):
    m = np.uint64(MASK32)
    x0 = (x0 + x1) & m
    x1 = _rotl(x1, r) ^ x0
    return x0, x1


@nb.njit(cache=True, inline="always")
def _four(x0, x1, ra, rb, rc, rd, ka, kb, s):
    m = np.uint64(MASK32)
    x0, x1 = _mix(x0, x1, ra)
    x0, x1 = _mix(x0, x1, rb)
    x0, x1 = _mix(x0, x1, rc)
    x0, x1 = _mix(x0, x1, rd)
    return (x0 + ka) & m, (x1 + kb + np.uint64(s)) & m


@nb.njit(cache=True)
def threefry2x32(k0, k1, c0, c1):
    """One Threefry-2x32-20 block.  All arguments are integers < 2**32."""
    m = np.uint64(MASK32)
    k0 = np.uint64(k0) & m
    k1 = np.uint64(k1) & m
    k2 = (k0 ^ k1 ^ np.uint64(_PARITY)) & m
    x0 = (np.uint64(c0) + k0) & m
    x1 = (np.uint64(c1) + k1) & m
    x0, x1 = _four(x0, x1, 13, 15, 26, 6, k1, k2, 1)
    x0, x1 = _four(x0, x1, 17, 29, 16, 24, k2, k0, 2)
    x0, x1 = _four(x0, x1, 13, 15, 26, 6, k0, k1, 3)
    x0, x1 = _four(x0, x1, 17, 29, 16, 24, k1, k2, 4)
    x0, x1 = _four(x0, x1, 13, 15, 26, 6, k2, k0, 5)
    return x0, x1


@nb.njit(cache=True, inline="always")
def ndtri(p):
    """Inverse standard normal CDF (Wichura's AS241, relative error ~1e-16)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                        + 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r
                        + 133.14166789178437745) * r + 3.387132872796366608) / (((((((5226.495278852545925 * r
                        + 28729.085735721942674) * r + 39307.89580009271061) * r + 21213.794301586595867) * r
                        + 5394.1960214247511077) * r + 687.1870074920579083) * r + 42.313330701600911252) * r + 1.0)
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        v = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
                 + 1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                 + 4.6303378461565452959) * r + 1.42343711074968357734) / (((((((1.05075007164441684324e-9 * r
                 + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                 + 0.68976733498510000455) * r + 1.6763848301838038494) * r + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        v = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
                 + 0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                 + 5.4637849111641143699) * r + 6.6579046435011037772) / (((((((2.04426310338993978564e-15 * r
                 + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                 + 0.0148753612908506148525) * r + 0.13692988092273580531) * r + 0.59983220655588793769) * r + 1.0)
    return -v if q < 0 else v


@nb.njit(cache=True, inline="always")
def normal_pair(k0, k1, c0, c1):
    """Two normals from one block, each by inversion of a 32-bit uniform in (0, 1)."""
    x0, x1 = threefry2x32(k0, k1, c0, c1)
    return ndtri((np.float64(x0) + 0.5) * 2.3283064365386963e-10), ndtri((np.float64(x1) + 0.5) * 2.3283064365386963e-10)


@nb.njit(cache=True, inline="always")
def normal_first(k0, k1, c0, c1):
    """The first normal of ``normal_pair`` alone (odd dimensions skip the second)."""
    x0, _ = threefry2x32(k0, k1, c0, c1)
    return ndtri((np.float64(x0) + 0.5) * 2.3283064365386963e-10)


@nb.njit(cache=True)
def _fill_normals(keys, streams, counter, out):
    n, m = out.shape
    for i in range(n):
        s = streams[i]
        for j in range(0, m, 2):
            if j + 1 < m:
                z0, z1 = normal_pair(keys[j // 2, 0], keys[j // 2, 1], s, counter)
                out[i, j] = z0
                out[i, j + 1] = z1
            else:
                out[i, j] = normal_first(keys[j // 2, 0], keys[j // 2, 1], s, counter)


@nb.njit(cache=True)
def _sum_normals(keys, streams, counter0, count, out):
    n, m = out.shape
    for i in range(n):
        s = streams[i]
        for j in range(m):
            out[i, j] = 0.0
        for c in range(count):
            ctr = counter0 + np.uint64(c)
            for j in range(0, m, 2):
                if j + 1 < m:
                    z0, z1 = normal_pair(keys[j // 2, 0], keys[j // 2, 1], s, ctr)
                    out[i, j] += z0
                    out[i, j + 1] += z1
                else:
                    out[i, j] += normal_first(keys[j // 2, 0], keys[j // 2, 1], s, ctr)


@nb.njit(cache=True)
def _fill_uniforms(k0, k1, streams, counter, out):
    for i in range(streams.shape[0]):
        x0, x1 = threefry2x32(k0, k1, streams[i], counter)
        out[i] = (np.float64(x0) * 4294967296.0 + np.float64(x1)) * 5.421010862427522e-20


def derive_key(seed: int, *tags: int) -> tuple[int, int]:
    """Fold integer tags into a 2x32 key, starting from a 64-bit seed."""
    k0, k1 = seed & MASK32, (seed >> 32) & MASK32
    for tag in tags:
        t0, t1 = tag & MASK32, (tag >> 32) & MASK32
        a, b = threefry2x32(k0, k1, t0, t1)
        k0, k1 = int(a), int(b)
    return k0, k1


def key_table(key: tuple[int, int], count: int) -> np.ndarray:
    """Sub-keys ``derive(key, j)`` for ``j < count`` as a (count, 2) uint64 array."""
    out = np.empty((count, 2), dtype=np.uint64)
    for j in range(count):
        a, b = threefry2x32(key[0], key[1], j, 0x5A5A5A5A)
        out[j] = (a, b)
    return out


def subkey(key: tuple[int, int], tag: int) -> tuple[int, int]:
    """An independent key for a named sub-purpose of ``key``."""
    a, b = threefry2x32(key[0], key[1], tag, 0xC0FFEE11)
    return int(a), int(b)


class NormalStream:
    """Standard normal vectors indexed by (stream id, counter).

    ``draw(streams, counter)`` returns one ``dim``-vector per stream id; the
    value for a given (stream, counter) pair never changes.
    """

    def __init__(self, key: tuple[int, int], dim: int):
        self.key = key
        self.dim = dim
        self._keys = key_table(key, (dim + 1) // 2)

    def draw(self, streams: np.ndarray, counter: int) -> np.ndarray:
        streams = np.ascontiguousarray(streams, dtype=np.uint64)
        out = np.empty((streams.shape[0], self.dim))
        _fill_normals(self._keys, streams, np.uint64(counter), out)
        return out

    def draw_sum(self, streams: np.ndarray, counter: int, count: int) -> np.ndarray:
        """Sum of ``draw(streams, c)`` over c = counter .. counter + count - 1."""
        streams = np.ascontiguousarray(streams, dtype=np.uint64)
        out = np.empty((streams.shape[0], self.dim))
        _sum_normals(self._keys, streams, np.uint64(counter), count, out)
        return out


def uniforms(key: tuple[int, int], streams: np.ndarray, counter: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) with 64-bit resolution, one per stream id."""
    streams = np.ascontiguousarray(streams, dtype=np.uint64)
    out = np.empty(streams.shape[0])
    _fill_uniforms(np.uint64(key[0]), np.uint64(key[1]), streams, np.uint64(counter), out)
    return out

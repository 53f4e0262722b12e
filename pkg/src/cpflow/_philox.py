"""Philox4x64-10 counter-based generator, scalar (jit) and vectorized (numpy).

The block function maps a 256-bit counter and a 128-bit key to four 64-bit
words. It reproduces numpy.random.Philox bit for bit, which the tests use as
the oracle. Every random quantity in the package is addressed by a counter,
so draws do not depend on evaluation order or on how work is split.
"""
import numpy as np

from ._jit import HAVE_NUMBA, njit

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_TWO_M53 = 1.0 / 9007199254740992.0


@njit
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _LO32) + (p2 & _LO32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    return hi, a * b


@njit
def philox_block(c0, c1, c2, c3, k0, k1):
    """One Philox4x64-10 block; all arguments are uint64."""
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


if not HAVE_NUMBA:
    _philox_block_py = philox_block

    def philox_block(c0, c1, c2, c3, k0, k1):
        """One Philox4x64-10 block; uint64 wraparound is intended."""
        with np.errstate(over="ignore"):
            return _philox_block_py(c0, c1, c2, c3, k0, k1)


@njit
def u01(w):
    """Uniform on [0, 1) from the top 53 bits of a word."""
    return float(w >> _S11) * _TWO_M53


def _mulhilo_np(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _LO32) + (p2 & _LO32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    return hi, a * b


def philox_np(c0, c1, c2, c3, k0, k1):
    """Vectorized block over broadcastable uint64 counter arrays."""
    shape = np.broadcast_shapes(np.shape(c0), np.shape(c1), np.shape(c2), np.shape(c3))
    c0, c1, c2, c3 = (np.broadcast_to(np.asarray(c, dtype=np.uint64), shape).copy()
                      for c in (c0, c1, c2, c3))
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    with np.errstate(over="ignore"):
        for _ in range(10):
            hi0, lo0 = _mulhilo_np(_M0, c0)
            hi1, lo1 = _mulhilo_np(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            k0 = k0 + _W0
            k1 = k1 + _W1
    return c0, c1, c2, c3


def u01_np(w):
    return (np.asarray(w, dtype=np.uint64) >> _S11).astype(np.float64) * _TWO_M53

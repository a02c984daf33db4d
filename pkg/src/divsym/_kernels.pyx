# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: SplitMix64/FNV streams and ARM immediate checks.

Bit-exact twin of divsym._kernels_py; see that module for the reference
semantics.
"""

from libc.stdint cimport uint32_t, uint64_t

BACKEND = "cython"

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef uint64_t FNV_OFFSET_C = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME_C = 0x100000001B3ULL


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def mix64(z):
    """SplitMix64 output function (finalizer only, no state increment)."""
    return _mix64(<uint64_t> z)


def fnv1a64(bytes data):
    """FNV-1a over a byte string, 64-bit."""
    cdef uint64_t h = FNV_OFFSET_C
    cdef const unsigned char* p = data
    cdef Py_ssize_t i, n = len(data)
    for i in range(n):
        h = (h ^ p[i]) * FNV_PRIME_C
    return h


def reseed(bytes identifier_utf8, scheme_seed):
    """Per-function PRNG reseed: FNV-1a of the identifier, xor seed, mix."""
    cdef uint64_t h = FNV_OFFSET_C
    cdef const unsigned char* p = identifier_utf8
    cdef Py_ssize_t i, n = len(identifier_utf8)
    for i in range(n):
        h = (h ^ p[i]) * FNV_PRIME_C
    return _mix64(h ^ (<uint64_t> scheme_seed))


def nop_gaps(seed, n_gaps, threshold):
    """Gap indices (1-based) selected for NOP insertion."""
    cdef uint64_t state = <uint64_t> seed
    cdef uint64_t thr = <uint64_t> threshold
    cdef long n = <long> n_gaps
    cdef long g
    out = []
    for g in range(1, n + 1):
        state += GAMMA
        if (_mix64(state) & 0xFFFFFFFFULL) < thr:
            out.append(g)
    return out


def arm_imm_encodable(v):
    """True if v fits an 8-bit value rotated right by an even amount."""
    cdef uint32_t x = <uint32_t> (v & 0xFFFFFFFF)
    cdef int r
    if (x & ~<uint32_t>0xFF) == 0:
        return True
    for r in range(2, 32, 2):
        if (((x << r) | (x >> (32 - r))) & ~<uint32_t>0xFF) == 0:
            return True
    return False

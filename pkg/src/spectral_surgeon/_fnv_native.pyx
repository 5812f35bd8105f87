# cython: boundscheck=False, wraparound=False
"""Compiled FNV-1a kernel. Byte-serial hashing is the one loop numpy cannot
vectorize (each step depends on the previous hash), so it gets a C inner loop."""


def fnv1a_update(unsigned long long h, const unsigned char[::1] data):
    cdef Py_ssize_t i, n = data.shape[0]
    for i in range(n):
        h = (h ^ data[i]) * <unsigned long long>0x100000001b3
    return h

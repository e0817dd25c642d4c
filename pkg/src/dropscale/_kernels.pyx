# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled enumeration kernel: gray-code sweep over all masks.

Successive gray codes differ in one bit, so the head logits are updated
in O(classes) per mask instead of rebuilt from scratch.  Logits are
recomputed exactly every 4096 masks to stop float drift, and the output
accumulators use Kahan compensation so the result matches the naive
index-order kernel within 1e-12 regardless of summation order.
"""

import numpy as np

from libc.math cimport exp, fmax, log

cdef double _LOG_FLOOR = -690.0

_ACT_CODES = {"linear": 0, "relu": 1, "softmax": 2}


def head_expectation_affine(w, b, z, double gate_factor, count_weights,
                            activation, bint want_geometric):
    """Mask expectation of a one-layer head; same contract as the pure kernel."""
    cdef int act = _ACT_CODES[activation]
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] wts = np.ascontiguousarray(count_weights, dtype=np.float64)
    cdef Py_ssize_t k = wv.shape[0], n = wv.shape[1]

    cols_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t j, c
    for j in range(n):
        for c in range(k):
            cols[j, c] = gate_factor * zv[j] * wv[c, j]

    logits_arr = np.array(b, dtype=np.float64)
    cdef double[::1] logits = logits_arr
    scratch_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] scratch = scratch_arr
    arith_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] arith = arith_arr
    geom_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] geom = geom_arr
    comp_a_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] comp_a = comp_a_arr
    comp_g_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] comp_g = comp_g_arr
    bits_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] bits = bits_arr

    cdef bint nonpos = False
    cdef Py_ssize_t count = 0
    cdef unsigned long long total = 1ULL << n
    cdef unsigned long long i
    cdef double wt, mx, se, v, ls, y, t
    for i in range(total):
        if i > 0:
            j = 0
            while not (i >> j) & 1:
                j += 1
            if bits[j]:
                bits[j] = 0
                count -= 1
                for c in range(k):
                    logits[c] -= cols[j, c]
            else:
                bits[j] = 1
                count += 1
                for c in range(k):
                    logits[c] += cols[j, c]
            if (i & 4095) == 0:
                for c in range(k):
                    logits[c] = bv[c]
                for j in range(n):
                    if bits[j]:
                        for c in range(k):
                            logits[c] += cols[j, c]

        wt = wts[count]
        if act == 2:
            mx = logits[0]
            for c in range(1, k):
                if logits[c] > mx:
                    mx = logits[c]
            se = 0.0
            for c in range(k):
                scratch[c] = exp(logits[c] - mx)
                se += scratch[c]
            for c in range(k):
                y = wt * scratch[c] / se - comp_a[c]
                t = arith[c] + y
                comp_a[c] = (t - arith[c]) - y
                arith[c] = t
            if want_geometric:
                ls = log(se)
                for c in range(k):
                    y = wt * fmax(logits[c] - mx - ls, _LOG_FLOOR) - comp_g[c]
                    t = geom[c] + y
                    comp_g[c] = (t - geom[c]) - y
                    geom[c] = t
        else:
            for c in range(k):
                v = logits[c]
                if act == 1 and v < 0.0:
                    v = 0.0
                y = wt * v - comp_a[c]
                t = arith[c] + y
                comp_a[c] = (t - arith[c]) - y
                arith[c] = t
                if want_geometric:
                    if v < 0.0:
                        nonpos = True
                    if v < 1e-300:
                        v = 1e-300
                    y = wt * fmax(log(v), _LOG_FLOOR) - comp_g[c]
                    t = geom[c] + y
                    comp_g[c] = (t - geom[c]) - y
                    geom[c] = t

    return arith_arr, (geom_arr if want_geometric else None), nonpos

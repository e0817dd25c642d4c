"""Pure-numpy enumeration kernel: naive chunked sweep over all masks.

Reference implementation of the hot oracle loop; the compiled gray-code
kernel in ``_kernels.pyx`` must match it within 1e-12.  Per-chunk sums
use pairwise reduction and the chunk partials are combined with fsum so
that the result is insensitive to summation order even at 2^22 masks.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import log_softmax, softmax

_CHUNK = 1 << 16
_LOG_FLOOR = -690.0

_ACT_CODES = {"linear": 0, "relu": 1, "softmax": 2}


def head_expectation_affine(w, b, z, gate_factor, count_weights, activation,
                            want_geometric):
    """Mask expectation of a one-layer head ``act(W (g * d * z) + b)``.

    Enumerates all 2^n keep masks d in index order, weighting mask d by
    ``count_weights[popcount(d)]``.  Returns ``(arith, geom, nonpos)``:
    the weighted arithmetic mean, the weighted mean of clamped
    log-outputs (None unless requested), and a flag set when a
    non-softmax output was negative while accumulating logs.
    """
    act = _ACT_CODES[activation]
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    count_weights = np.asarray(count_weights, dtype=np.float64)
    k, n = w.shape
    cols = (gate_factor * z)[:, None] * w.T  # (n, k) per-unit logit contribution

    arith_parts = []
    geom_parts = [] if want_geometric else None
    nonpos = False
    total = 1 << n
    unit_bits = np.arange(n, dtype=np.int64)
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        bits = ((idx[:, None] >> unit_bits) & 1).astype(np.float64)
        logits = bits @ cols + b
        wts = count_weights[bits.sum(axis=1).astype(np.int64)]

        if act == 2:
            probs = softmax(logits)
            arith_parts.append(np.sum(wts[:, None] * probs, axis=0))
            if want_geometric:
                logs = np.maximum(log_softmax(logits), _LOG_FLOOR)
                geom_parts.append(np.sum(wts[:, None] * logs, axis=0))
        else:
            vals = logits if act == 0 else np.maximum(logits, 0.0)
            arith_parts.append(np.sum(wts[:, None] * vals, axis=0))
            if want_geometric:
                nonpos = nonpos or bool((vals < 0.0).any())
                logs = np.maximum(np.log(np.maximum(vals, 1e-300)), _LOG_FLOOR)
                geom_parts.append(np.sum(wts[:, None] * logs, axis=0))

    arith = np.array([math.fsum(p[c] for p in arith_parts) for c in range(k)])
    geom = None
    if want_geometric:
        geom = np.array([math.fsum(p[c] for p in geom_parts) for c in range(k)])
    return arith, geom, nonpos

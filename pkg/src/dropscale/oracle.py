"""Exact dropout averages by exhaustive mask enumeration.

A network with a single n-unit dropout gate is a mixture of 2^n
weight-sharing submodels, one per keep mask, where a mask with c kept
units carries probability p^c (1-p)^(n-c).  This module evaluates the
exact arithmetic and geometric averages of all submodel outputs: the
layers below the gate run once per input and only the head above it is
re-evaluated per mask.  Everything else in the package is checked
against these two functions.
"""

from __future__ import annotations

import math

import numpy as np

from ._backend import kernels
from .errors import EnumerationLimitError
from .network import DropoutGate, NetworkParams, head_forward, trunk_forward

MAX_GATED_WIDTH = 22

_LOG_FLOOR = -690.0
_CHUNK = 1 << 16


def mask_count_weights(n: int, p: float) -> np.ndarray:
    """Per-count mask probabilities: entry c is p^c (1-p)^(n-c).

    Every mask with exactly c kept units has this probability, so the
    (n+1,) table summed against the binomial counts carries total mass 1.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"keep probability must lie in [0, 1], got {p}")
    c = np.arange(n + 1, dtype=np.float64)
    return np.power(p, c) * np.power(1.0 - p, n - c)


def mask_weight_total(n: int, p: float) -> float:
    """Total probability mass over all 2^n masks (equals 1 up to rounding)."""
    w = mask_count_weights(n, p)
    return math.fsum(math.comb(n, c) * w[c] for c in range(n + 1))


def _checked_width(params: NetworkParams, gate: DropoutGate) -> int:
    n = params.gated_width(gate)
    if n > MAX_GATED_WIDTH:
        raise EnumerationLimitError(
            f"gated width {n} exceeds the enumeration cap of {MAX_GATED_WIDTH} "
            f"units ({1 << n} masks); use Monte Carlo averaging instead"
        )
    return n


def _enumerate_multilayer(params, gate, z, factor, weights, want_geometric):
    """Chunked index-order sweep for heads with more than one layer."""
    n = z.shape[0]
    k = params.out_dim
    softmax_out = params.activations[-1] == "softmax"
    arith = np.zeros(k)
    geom = np.zeros(k) if want_geometric else None
    nonpos = False
    gz = factor * z
    unit_bits = np.arange(n, dtype=np.int64)
    total = 1 << n
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        bits = ((idx[:, None] >> unit_bits) & 1).astype(np.float64)
        wts = weights[bits.sum(axis=1).astype(np.int64)]
        outs = head_forward(params, gate, bits * gz)
        arith += wts @ outs
        if want_geometric:
            if softmax_out:
                logs = head_forward(params, gate, bits * gz, return_log=True)
                geom += wts @ np.maximum(logs, _LOG_FLOOR)
            else:
                nonpos = nonpos or bool((outs < 0.0).any())
                geom += wts @ np.maximum(np.log(np.maximum(outs, 1e-300)), _LOG_FLOOR)
    return arith, geom, nonpos


def _enumerate_head(params, gate, z, want_geometric):
    """(arith, geom, nonpos) accumulators for one trunk-output row."""
    weights = mask_count_weights(z.shape[0], gate.p)
    factor = gate.train_factor()
    if gate.position == params.layer_count - 1:
        return kernels.head_expectation_affine(
            params.weights[-1], params.biases[-1], z, factor, weights,
            params.activations[-1], want_geometric)
    return _enumerate_multilayer(params, gate, z, factor, weights, want_geometric)


def exact_arithmetic(params: NetworkParams, gate: DropoutGate, x) -> np.ndarray:
    """Probability-weighted mean submodel output over all 2^n masks.

    Accepts a single example ``(d,)`` or a batch ``(m, d)``.  For a
    softmax network the result is itself a distribution (a convex
    combination of distributions).  Gated widths above 22 are refused.
    """
    _checked_width(params, gate)
    z = trunk_forward(params, gate, x)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    out = np.stack([_enumerate_head(params, gate, row, False)[0] for row in rows])
    return out[0] if single else out


def exact_geometric(params: NetworkParams, gate: DropoutGate, x) -> np.ndarray:
    """Probability-weighted geometric mean of submodel outputs.

    Computed in log space with each log-output clamped at -690.  Softmax
    outputs are renormalized to sum 1; other outputs are returned as the
    bare geometric mean and must be nonnegative.
    """
    _checked_width(params, gate)
    softmax_out = params.activations[-1] == "softmax"
    z = trunk_forward(params, gate, x)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    outs = []
    for row in rows:
        _, geom, nonpos = _enumerate_head(params, gate, row, True)
        if softmax_out:
            g = np.exp(geom - geom.max())
            outs.append(g / g.sum())
        else:
            if nonpos:
                raise ValueError(
                    "geometric averaging needs nonnegative submodel outputs")
            outs.append(np.exp(geom))
    out = np.stack(outs)
    return out[0] if single else out


def approximation_gap(params: NetworkParams, gate: DropoutGate, x, method,
                      *, scale=None, mc=None) -> np.ndarray:
    """Per-class |approximate output - exact arithmetic average| for x.

    `method` is anything accepted by :func:`inference.predict`; `scale`
    and `mc` are forwarded to it.
    """
    from .inference import predict  # deferred: inference imports this module

    approx = predict(params, gate, x, method, scale=scale, mc=mc)
    return np.abs(approx - exact_arithmetic(params, gate, x))

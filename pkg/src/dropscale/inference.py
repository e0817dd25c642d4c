"""Approximations of the dropout inference average.

Four predictors stand in for the exact mask average: uniform weight
scaling (fold the keep probability into the gate input), Monte Carlo
arithmetic and geometric averaging over sampled masks, and non-uniform
scaling by an arbitrary feasible per-unit vector.  All of them accept a
single example ``(d,)`` or a batch ``(m, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import DimensionMismatchError, InfeasibleScaleError
from .network import (DropoutGate, NetworkParams, Scaled, forward,
                      head_forward, trunk_forward)
from .oracle import exact_arithmetic, exact_geometric
from .tensor import RngStream, bernoulli_mask_block

BOX_TOLERANCE = 1e-6

_LOG_FLOOR = -690.0


class InferenceMethod(str, Enum):
    """Which output approximation to apply."""

    WEIGHT_SCALED = "weight_scaled"
    MC_ARITHMETIC = "mc_arithmetic"
    MC_GEOMETRIC = "mc_geometric"
    SCALED = "scaled"
    EXACT_ARITHMETIC = "exact_arithmetic"
    EXACT_GEOMETRIC = "exact_geometric"


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo averaging settings.

    Mask k always comes from the substream derived as ("mc", k) of the
    seed, so growing `samples` never reshuffles earlier draws.  With
    `enumerate_all` set, sampling is replaced by the probability-weighted
    sweep over all 2^n masks (the exact oracle).
    """

    samples: int = 128
    seed: int = 0
    mean_kind: str = "arithmetic"
    enumerate_all: bool = False

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError(f"sample count must be at least 1, got {self.samples}")
        if self.mean_kind not in ("arithmetic", "geometric"):
            raise ValueError(f"unknown mean kind {self.mean_kind!r}")


def classification_error(probs, labels) -> float:
    """Fraction of rows whose argmax class differs from the label."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (p.shape[0],):
        raise DimensionMismatchError(
            f"labels shape {labels.shape} does not match {p.shape[0]} rows")
    return float(np.mean(np.argmax(p, axis=1) != labels))


def predict_weight_scaled(params: NetworkParams, gate: DropoutGate, x) -> np.ndarray:
    """One deterministic forward with the gate folded to its mean.

    The classical convention multiplies the gate input by p; the inverted
    convention leaves it untouched because the 1/p train-time factor
    already compensates.
    """
    n = params.gated_width(gate)
    s = np.full(n, gate.uniform_scale())
    out, _ = forward(params, gate, Scaled(s), x)
    return out


def predict_scaled(params: NetworkParams, gate: DropoutGate, s, x) -> np.ndarray:
    """Forward pass with a non-uniform per-unit scale vector.

    The vector must stay inside the convention's box [0, u] up to a
    tolerance of 1e-6; anything further out is rejected.
    """
    s = np.asarray(s, dtype=np.float64)
    n = params.gated_width(gate)
    if s.shape != (n,):
        raise DimensionMismatchError(
            f"scale shape {s.shape} does not match gated width {n}")
    upper = gate.scale_upper_bound()
    if s.min() < -BOX_TOLERANCE or s.max() > upper + BOX_TOLERANCE:
        raise InfeasibleScaleError(
            f"scale vector leaves the box [0, {upper:g}] by more than "
            f"{BOX_TOLERANCE:g} (min {s.min():.8g}, max {s.max():.8g})")
    out, _ = forward(params, gate, Scaled(s), x)
    return out


def predict_mc(params: NetworkParams, gate: DropoutGate, x, cfg: McConfig,
               return_spread: bool = False):
    """Monte Carlo average of sampled submodel outputs.

    arithmetic: elementwise mean of the N submodel outputs.  geometric:
    mean of log-outputs (clamped at -690), exponentiated; softmax outputs
    are then renormalized to sum 1.  With `return_spread` (arithmetic
    only) also returns the per-class sample standard deviation across the
    N submodels.
    """
    if cfg.enumerate_all:
        if return_spread:
            raise ValueError("spread is not defined for the exhaustive sweep")
        if cfg.mean_kind == "arithmetic":
            return exact_arithmetic(params, gate, x)
        return exact_geometric(params, gate, x)
    geometric = cfg.mean_kind == "geometric"
    if return_spread and geometric:
        raise ValueError("spread is only defined for arithmetic averaging")

    n = params.gated_width(gate)
    masks = bernoulli_mask_block(RngStream(cfg.seed), "mc", cfg.samples, n, gate.p)
    gated_masks = masks * gate.train_factor()
    z = trunk_forward(params, gate, x)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    m = rows.shape[0]
    k = params.out_dim
    softmax_out = params.activations[-1] == "softmax"

    acc = np.zeros((m, k))
    acc_sq = np.zeros((m, k)) if return_spread else None
    chunk = max(1, (1 << 20) // m)
    for start in range(0, cfg.samples, chunk):
        g = gated_masks[start:start + chunk]
        gated = (g[:, None, :] * rows[None, :, :]).reshape(-1, n)
        if geometric:
            if softmax_out:
                logs = head_forward(params, gate, gated, return_log=True)
            else:
                vals = head_forward(params, gate, gated)
                if (vals < 0.0).any():
                    raise ValueError(
                        "geometric averaging needs nonnegative submodel outputs")
                logs = np.log(np.maximum(vals, 1e-300))
            acc += np.maximum(logs, _LOG_FLOOR).reshape(len(g), m, k).sum(axis=0)
        else:
            outs = head_forward(params, gate, gated).reshape(len(g), m, k)
            acc += outs.sum(axis=0)
            if return_spread:
                acc_sq += (outs ** 2).sum(axis=0)

    mean = acc / cfg.samples
    if geometric:
        if softmax_out:
            out = np.exp(mean - mean.max(axis=1, keepdims=True))
            out /= out.sum(axis=1, keepdims=True)
        else:
            out = np.exp(mean)
        return out[0] if single else out
    if return_spread:
        correction = cfg.samples / max(cfg.samples - 1, 1)
        var = np.maximum(acc_sq / cfg.samples - mean ** 2, 0.0) * correction
        sd = np.sqrt(var)
        return (mean[0], sd[0]) if single else (mean, sd)
    return mean[0] if single else mean


def predict(params: NetworkParams, gate: DropoutGate, x, method,
            *, scale=None, mc: McConfig = None) -> np.ndarray:
    """Dispatch to one approximation by method name or enum value."""
    method = InferenceMethod(method)
    if method is InferenceMethod.WEIGHT_SCALED:
        return predict_weight_scaled(params, gate, x)
    if method is InferenceMethod.SCALED:
        if scale is None:
            raise ValueError("scaled prediction needs a scale vector")
        return predict_scaled(params, gate, scale, x)
    if method is InferenceMethod.EXACT_ARITHMETIC:
        return exact_arithmetic(params, gate, x)
    if method is InferenceMethod.EXACT_GEOMETRIC:
        return exact_geometric(params, gate, x)
    cfg = mc if mc is not None else McConfig()
    kind = "arithmetic" if method is InferenceMethod.MC_ARITHMETIC else "geometric"
    if cfg.mean_kind != kind:
        cfg = replace(cfg, mean_kind=kind)
    return predict_mc(params, gate, x, cfg)

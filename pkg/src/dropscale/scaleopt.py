"""Non-uniform inference scale vectors by penalized gradient descent.

A feasible scale vector keeps a fixed mean m and lives in the box
[0, u].  The mean constraint holds by construction through the
recentering map s = e - mean(e) + m over a free vector e; box
violations are discouraged during optimization by a hinge penalty with
weight lambda and removed afterwards by an iterated clip-and-recenter
repair.  Iterate 0 is the uniform vector and the returned iterate
minimizes validation error over all epochs, so the result never scores
worse on validation than uniform weight scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import (DataFormatError, DimensionMismatchError, DivergenceError,
                     InfeasibleScaleError, RepairError)
from .inference import classification_error
from .network import (DropoutGate, NetworkParams, Scaled, backprop_scale,
                      forward, trunk_forward)
from .tensor import RngStream, cross_entropy_batch
from .trainer import Adam

_SCALE_FORMAT_VERSION = 1
_MEAN_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ConstraintSet:
    """Mean target m and box [0, upper_bound] for a scale vector."""

    mean_target: float
    upper_bound: float

    def __post_init__(self):
        if not 0.0 < self.mean_target < self.upper_bound:
            raise InfeasibleScaleError(
                f"need 0 < mean target < upper bound, got mean "
                f"{self.mean_target} and bound {self.upper_bound}")

    @classmethod
    def for_gate(cls, gate: DropoutGate) -> "ConstraintSet":
        """classical: mean p, box [0, 1]; inverted: mean 1, box [0, 1/p].

        With p=1 both conventions leave a single feasible point, so no
        constraint set exists (the uniform vector is the only choice).
        """
        if gate.p == 1.0:
            raise InfeasibleScaleError(
                "keep probability 1 pins every scale to the mean target; "
                "scale optimization needs p < 1")
        if gate.convention == "classical":
            return cls(gate.p, 1.0)
        return cls(1.0, 1.0 / gate.p)


@dataclass(frozen=True)
class PenaltyConfig:
    """Shared weight of the box-violation hinge terms."""

    lam: float = 10000.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"penalty weight must be positive, got {self.lam}")


@dataclass(frozen=True)
class ScaleOptConfig:
    """Adam settings and epoch budget for the scale-vector descent.

    `optimize_on_validation` switches the gradient batches from the
    training split to the validation split; it is off by default because
    it changes what the selected validation error measures.
    """

    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 50
    seed: int = 0
    optimize_on_validation: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("Adam epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("epoch budget cannot be negative")


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    objective: float
    penalty: float
    val_error: float


@dataclass
class ScaleOptResult:
    """Selected scale vector with its validation error, epoch, and trace."""

    scale: np.ndarray
    val_error: float
    epoch: int
    trace: List[TraceRecord]


def reparametrize(e, cs: ConstraintSet) -> np.ndarray:
    """s = e - mean(e) + m; the mean constraint holds by construction."""
    e = np.asarray(e, dtype=np.float64)
    return e - e.mean() + cs.mean_target


def penalty(s, cs: ConstraintSet, lam: float) -> float:
    """Hinge penalty sum_k lam * (max(0, s_k - u) - min(0, s_k)).

    The hinges are evaluated in penalty units (lam folded into both sides
    before differencing); the result is zero exactly when every component
    lies inside [0, u].
    """
    t = lam * np.asarray(s, dtype=np.float64)
    over = np.maximum(t - lam * cs.upper_bound, 0.0)
    under = np.minimum(t, 0.0)
    return float(np.sum(over - under))


def penalty_subgradient(s, cs: ConstraintSet, lam: float) -> np.ndarray:
    """+lam above the box, -lam below, 0 inside and exactly at the bounds."""
    t = lam * np.asarray(s, dtype=np.float64)
    up = (t > lam * cs.upper_bound).astype(np.float64)
    down = (t < 0.0).astype(np.float64)
    return lam * (up - down)


def objective_and_gradient(e, cs: ConstraintSet, pcfg: PenaltyConfig,
                           params: NetworkParams, gate: DropoutGate,
                           x, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of the scaled forward plus the box penalty.

    Returns ``(objective, gradient w.r.t. e)``.  The chain rule through
    the recentering map subtracts the componentwise mean from the scale
    gradient, so the returned gradient always sums to zero.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if x.shape[0] == 0:
        raise ValueError("objective needs a non-empty batch")
    s = reparametrize(e, cs)
    probs, cache = forward(params, gate, Scaled(s), x)
    data_loss = float(cross_entropy_batch(probs, labels).mean())
    obj = data_loss + penalty(s, cs, pcfg.lam)
    dscale = np.atleast_2d(backprop_scale(cache, labels)).mean(axis=0)
    ds = dscale + penalty_subgradient(s, cs, pcfg.lam)
    return obj, ds - ds.mean()


def feasibility_repair(s, cs: ConstraintSet, max_rounds: int = 100,
                       tol: float = 1e-9) -> np.ndarray:
    """Clip to [0, u] then recenter to the mean, repeated to a fixed point.

    Requires mean(s) already at the target within 1e-9.  An already
    feasible vector is returned unchanged; otherwise the iteration stops
    once the largest box violation drops to `tol`.
    """
    s = np.asarray(s, dtype=np.float64)
    if abs(s.mean() - cs.mean_target) > _MEAN_TOLERANCE:
        raise InfeasibleScaleError(
            f"repair needs mean {cs.mean_target:g}, got {s.mean()!r}")
    current = s
    for _ in range(max_rounds):
        if current.min() >= -tol and current.max() <= cs.upper_bound + tol:
            return current
        clipped = np.clip(current, 0.0, cs.upper_bound)
        current = clipped - clipped.mean() + cs.mean_target
    raise RepairError(
        f"feasibility repair did not converge within {max_rounds} rounds")


def optimize_scale(params: NetworkParams, gate: DropoutGate,
                   cs: ConstraintSet, pcfg: PenaltyConfig,
                   ocfg: ScaleOptConfig, train_set, val_set) -> ScaleOptResult:
    """Penalized mini-batch Adam descent on e with epoch-level selection.

    The parameters stay frozen, so the layers below the gate are
    evaluated once per dataset and the descent runs on the head alone.
    Iterate 0 (e = 0) is exactly uniform scaling; after every epoch the
    repaired scale vector is scored as classification error on the
    validation split and the best scorer is kept, ties going to the
    latest iterate.  Because iterate 0 participates, the selected
    validation error never exceeds uniform weight scaling's.
    """
    n = params.gated_width(gate)
    head = NetworkParams(list(params.weights[gate.position:]),
                         list(params.biases[gate.position:]),
                         params.activations[gate.position:])
    head_gate = DropoutGate(position=0, p=gate.p, convention=gate.convention)
    z_train = trunk_forward(params, gate,
                            np.asarray(train_set.features, dtype=np.float64))
    y_train = np.asarray(train_set.labels)
    z_val = trunk_forward(params, gate,
                          np.asarray(val_set.features, dtype=np.float64))
    y_val = np.asarray(val_set.labels)
    if z_train.shape[0] == 0 or z_val.shape[0] == 0:
        raise ValueError("scale optimization needs non-empty train and "
                         "validation sets")
    if ocfg.optimize_on_validation:
        z_opt, y_opt = z_val, y_val
    else:
        z_opt, y_opt = z_train, y_train

    def candidate_error(s):
        probs, _ = forward(head, head_gate, Scaled(s), z_val)
        return classification_error(probs, y_val)

    def full_objective(e):
        obj, _ = objective_and_gradient(e, cs, pcfg, head, head_gate,
                                        z_opt, y_opt)
        return obj

    e = np.zeros(n)
    adam = Adam([e], ocfg.learning_rate, ocfg.adam_beta1, ocfg.adam_beta2,
                ocfg.adam_eps)
    rng = RngStream(ocfg.seed)

    s0 = feasibility_repair(reparametrize(e, cs), cs)
    best = ScaleOptResult(s0, candidate_error(s0), 0, [])
    best.trace.append(TraceRecord(0, full_objective(e),
                                  penalty(s0, cs, pcfg.lam), best.val_error))

    m = z_opt.shape[0]
    for epoch in range(1, ocfg.max_epochs + 1):
        order = rng.derive("shuffle", epoch).permutation(m)
        total, batches = 0.0, 0
        for start in range(0, m, ocfg.batch_size):
            pick = order[start:start + ocfg.batch_size]
            obj, grad = objective_and_gradient(e, cs, pcfg, head, head_gate,
                                               z_opt[pick], y_opt[pick])
            if not np.isfinite(obj):
                raise DivergenceError(
                    f"non-finite scale objective in epoch {epoch}",
                    trace=best.trace)
            total += obj
            batches += 1
            adam.step([e], [grad])
        raw = reparametrize(e, cs)
        s = feasibility_repair(raw, cs)
        err = candidate_error(s)
        best.trace.append(TraceRecord(epoch, total / batches,
                                      penalty(raw, cs, pcfg.lam), err))
        if err <= best.val_error:
            best.scale, best.val_error, best.epoch = s, err, epoch
    return best


def save_scale(path, s, cs: ConstraintSet, val_error: Optional[float] = None):
    """Persist a scale vector with its constraint set as JSON."""
    payload = {
        "format_version": _SCALE_FORMAT_VERSION,
        "mean_target": cs.mean_target,
        "upper_bound": cs.upper_bound,
        "scale": [float(v) for v in np.asarray(s, dtype=np.float64)],
    }
    if val_error is not None:
        payload["val_error"] = float(val_error)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def load_scale(path) -> Tuple[np.ndarray, ConstraintSet, Optional[float]]:
    """Read a scale file: returns (s, constraints, stored val error or None).

    The vector is checked against its recorded constraints: mean within
    1e-9 of the target and box violations at most 1e-6.
    """
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"{path}: no such file")
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a scale file ({exc})") from None
    if not isinstance(payload, dict) or "scale" not in payload:
        raise DataFormatError(f"{path}: not a scale file (no scale entry)")
    if payload.get("format_version") != _SCALE_FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported scale format version "
            f"{payload.get('format_version')!r}")
    cs = ConstraintSet(payload["mean_target"], payload["upper_bound"])
    s = np.asarray(payload["scale"], dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DataFormatError(f"{path}: scale entry must be a non-empty vector")
    if abs(s.mean() - cs.mean_target) > _MEAN_TOLERANCE:
        raise InfeasibleScaleError(
            f"{path}: stored scale has mean {s.mean()!r}, expected "
            f"{cs.mean_target:g}")
    if s.min() < -1e-6 or s.max() > cs.upper_bound + 1e-6:
        raise InfeasibleScaleError(
            f"{path}: stored scale leaves the box [0, {cs.upper_bound:g}]")
    return s, cs, payload.get("val_error")


def check_scale_for_gate(s: np.ndarray, cs: ConstraintSet, gate: DropoutGate,
                         width: int) -> None:
    """Reject a loaded scale that does not fit the gate it is applied to."""
    expected = ConstraintSet.for_gate(gate)
    if (cs.mean_target, cs.upper_bound) != (expected.mean_target,
                                            expected.upper_bound):
        raise InfeasibleScaleError(
            f"scale constraints (mean {cs.mean_target:g}, bound "
            f"{cs.upper_bound:g}) do not match the gate's convention "
            f"(mean {expected.mean_target:g}, bound {expected.upper_bound:g})")
    if s.shape != (width,):
        raise DimensionMismatchError(
            f"scale length {s.shape[0]} does not match gated width {width}")

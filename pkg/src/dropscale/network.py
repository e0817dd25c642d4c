"""Feedforward networks with a single dropout gate.

A network is a chain of affine layers with relu/linear/softmax
activations and exactly one dropout gate that multiplies the *input* of
one layer.  Forward passes run in three modes: plain (no gating), masked
(a {0,1} keep mask, mirroring train time), and scaled (an arbitrary
per-unit multiplier, used at inference).  Reverse-mode gradients are
available with respect to the parameters and with respect to the scale
vector.

All forward/backward entry points accept a single example ``(d,)`` or a
batch ``(m, d)`` and are pure functions of their inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataFormatError, DimensionMismatchError
from .tensor import softmax

ACTIVATIONS = ("relu", "linear", "softmax")
CONVENTIONS = ("classical", "inverted")

_MAGIC = b"DSNET\x00"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dimensions must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def validate_layer_specs(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("network needs at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise DimensionMismatchError(
                f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}"
            )
    for spec in specs[:-1]:
        if spec.activation == "softmax":
            raise ValueError("softmax is only allowed on the final layer")


@dataclass(frozen=True)
class DropoutGate:
    """Single dropout site: the input of layer `position` is masked.

    `convention` controls train-time scaling: "classical" leaves kept
    activations untouched (inference then scales by p), "inverted"
    multiplies kept activations by 1/p at train time so plain inference
    needs no correction.
    """

    position: int
    p: float
    convention: str = "inverted"

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"keep probability must lie in (0, 1], got {self.p}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown dropout convention {self.convention!r}")
        if self.position < 0:
            raise ValueError("gate position must be non-negative")

    def train_factor(self) -> float:
        """Multiplier applied to kept units during masked forwards."""
        return 1.0 / self.p if self.convention == "inverted" else 1.0

    def uniform_scale(self) -> float:
        """The per-unit value of the uniform weight-scaling vector."""
        return self.p if self.convention == "classical" else 1.0

    def scale_upper_bound(self) -> float:
        """Box upper bound for scale vectors under this convention."""
        return 1.0 if self.convention == "classical" else 1.0 / self.p


@dataclass
class NetworkParams:
    """Per-layer weight matrices (out x in) and bias vectors."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: Tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionMismatchError("weights/biases/activations lengths differ")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionMismatchError(
                    f"bad layer shapes W{w.shape} b{b.shape}"
                )
        for w, w_next in zip(self.weights, self.weights[1:]):
            if w.shape[0] != w_next.shape[1]:
                raise DimensionMismatchError(
                    f"layer dimensions do not chain: {w.shape[0]} -> {w_next.shape[1]}"
                )

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def gated_width(self, gate: DropoutGate) -> int:
        if gate.position >= self.layer_count:
            raise DimensionMismatchError(
                f"gate position {gate.position} out of range for {self.layer_count} layers"
            )
        return self.weights[gate.position].shape[1]

    def layer_specs(self) -> Tuple[LayerSpec, ...]:
        return tuple(
            LayerSpec(w.shape[1], w.shape[0], act)
            for w, act in zip(self.weights, self.activations)
        )

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activations,
        )


class Plain:
    """No gating: the forward pass ignores the dropout gate."""

    def __repr__(self):
        return "Plain()"


PLAIN = Plain()


@dataclass(frozen=True)
class Masked:
    """Train-style gating: multiply by a {0,1} mask (and 1/p when inverted)."""

    mask: np.ndarray


@dataclass(frozen=True)
class Scaled:
    """Inference-style gating: multiply by the scale vector as given."""

    scale: np.ndarray


ForwardMode = Union[Plain, Masked, Scaled]


@dataclass
class ForwardCache:
    """Activation record of one forward pass, consumed by the backprops."""

    params: NetworkParams
    gate: DropoutGate
    mode: ForwardMode
    layer_inputs: List[np.ndarray]  # post-gating input of each layer, (m, in)
    pres: List[np.ndarray]  # pre-activation of each layer, (m, out)
    posts: List[np.ndarray]  # post-activation of each layer, (m, out)
    gate_input_raw: np.ndarray  # value entering the gate before any multiplier
    gate_multiplier: Optional[np.ndarray]  # (n,) or (m, n); None in plain mode
    single: bool = field(default=False, repr=False)


def _apply_activation(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "linear":
        return pre
    return softmax(pre)


def _activation_grad(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)  # derivative at exactly 0 is 0
    if kind == "linear":
        return np.ones_like(pre)
    raise ValueError("softmax gradients are fused with the loss")


def _gate_multiplier(params: NetworkParams, gate: DropoutGate, mode: ForwardMode,
                     batch: int) -> Optional[np.ndarray]:
    n = params.gated_width(gate)
    if isinstance(mode, Plain):
        return None
    if isinstance(mode, Masked):
        mask = np.asarray(mode.mask, dtype=np.float64)
        if mask.shape not in ((n,), (batch, n)):
            raise DimensionMismatchError(
                f"mask shape {mask.shape} does not match gated width {n}"
            )
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        return mask * gate.train_factor()
    if isinstance(mode, Scaled):
        s = np.asarray(mode.scale, dtype=np.float64)
        if s.shape != (n,):
            raise DimensionMismatchError(
                f"scale shape {s.shape} does not match gated width {n}"
            )
        return s
    raise TypeError(f"unknown forward mode {mode!r}")


def forward(params: NetworkParams, gate: DropoutGate, mode: ForwardMode,
            x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Run the network on `x` ((d,) or (m, d)); returns (output, cache).

    The output of a softmax-terminated network is a probability
    distribution per example.  The cache records every layer's pre- and
    post-activation for the backprop entry points.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"input shape {x.shape} does not match first layer in_dim {params.in_dim}"
        )
    gmul = _gate_multiplier(params, gate, mode, X.shape[0])

    layer_inputs, pres, posts = [], [], []
    gate_input_raw = None
    z = X
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if i == gate.position:
            gate_input_raw = z
            if gmul is not None:
                z = z * gmul
        layer_inputs.append(z)
        pre = z @ w.T + b
        post = _apply_activation(act, pre)
        pres.append(pre)
        posts.append(post)
        z = post
    cache = ForwardCache(params, gate, mode, layer_inputs, pres, posts,
                         gate_input_raw, gmul, single)
    out = posts[-1]
    return (out[0] if single else out), cache


def _backward(cache: ForwardCache, labels: np.ndarray, need_scale: bool):
    """Shared reverse sweep; returns (dWs, dbs, dscale_per_example)."""
    params, gate = cache.params, cache.gate
    if params.activations[-1] != "softmax":
        raise ValueError("cross-entropy gradients require a softmax output layer")
    m = cache.posts[-1].shape[0]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (m,):
        raise DimensionMismatchError(
            f"labels shape {labels.shape} does not match batch size {m}"
        )
    if labels.min() < 0 or labels.max() >= params.out_dim:
        raise IndexError("label out of range")

    delta = cache.posts[-1].copy()  # softmax + cross-entropy fuse to probs - onehot
    delta[np.arange(m), labels] -= 1.0

    dws: List[np.ndarray] = [None] * params.layer_count
    dbs: List[np.ndarray] = [None] * params.layer_count
    dscale = None
    for i in range(params.layer_count - 1, -1, -1):
        dws[i] = delta.T @ cache.layer_inputs[i]
        dbs[i] = delta.sum(axis=0)
        if need_scale and i == gate.position:
            dscale = cache.gate_input_raw * (delta @ params.weights[i])
        if i == 0:
            break
        dz = delta @ params.weights[i]
        if i == gate.position and cache.gate_multiplier is not None:
            dz = dz * cache.gate_multiplier  # gating is a constant factor
        delta = dz * _activation_grad(params.activations[i - 1], cache.pres[i - 1])
    return dws, dbs, dscale


def backprop_params(cache: ForwardCache, labels) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Cross-entropy gradients w.r.t. every weight matrix and bias vector.

    For a batch cache the gradients are summed over the batch (callers
    normalize as they see fit).
    """
    dws, dbs, _ = _backward(cache, labels, need_scale=False)
    return dws, dbs


def backprop_scale(cache: ForwardCache, labels) -> np.ndarray:
    """Cross-entropy gradient w.r.t. the scale vector of a Scaled forward.

    Componentwise: dL/ds_k = z_k * (W^T delta)_k, with z the raw gated
    input and delta the backpropagated error at the gated layer's
    pre-activation.  Returns (n,) for a single example, (m, n) per
    example for a batch.
    """
    if not isinstance(cache.mode, Scaled):
        raise ValueError("scale gradients require a cache from a Scaled forward")
    _, _, dscale = _backward(cache, labels, need_scale=True)
    return dscale[0] if cache.single else dscale


def trunk_forward(params: NetworkParams, gate: DropoutGate, x: np.ndarray) -> np.ndarray:
    """Evaluate the layers below the gate; returns the raw gate input.

    The trunk is mask-independent, so submodel enumeration and Monte
    Carlo sampling evaluate it once and re-run only the head.
    """
    params.gated_width(gate)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    z = x[None, :] if single else x
    if z.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"input shape {x.shape} does not match first layer in_dim {params.in_dim}"
        )
    for i in range(gate.position):
        z = _apply_activation(params.activations[i],
                              z @ params.weights[i].T + params.biases[i])
    return z[0] if single else z


def head_forward(params: NetworkParams, gate: DropoutGate, gated: np.ndarray,
                 return_log: bool = False) -> np.ndarray:
    """Evaluate the layers from the gate upward on already-gated input.

    `gated` is the gate input *after* multiplication by a mask or scale
    vector, (n,) or (m, n).  With ``return_log=True`` and a softmax
    output layer, returns stable log-probabilities instead.
    """
    gated = np.asarray(gated, dtype=np.float64)
    single = gated.ndim == 1
    z = gated[None, :] if single else gated
    last = params.layer_count - 1
    for i in range(gate.position, params.layer_count):
        pre = z @ params.weights[i].T + params.biases[i]
        if return_log and i == last and params.activations[i] == "softmax":
            shifted = pre - pre.max(axis=1, keepdims=True)
            z = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            break
        z = _apply_activation(params.activations[i], pre)
    return z[0] if single else z


def save_network(path, params: NetworkParams, gate: DropoutGate) -> None:
    """Serialize network + gate to a versioned binary file (bit-exact)."""
    header = {
        "dims": [[w.shape[1], w.shape[0]] for w in params.weights],
        "activations": list(params.activations),
        "gate": {"position": gate.position, "p": gate.p, "convention": gate.convention},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_network(path) -> Tuple[NetworkParams, DropoutGate]:
    """Read a file written by save_network; round-trips bit-exactly."""
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"{path}: no such file")
    raw = p.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a network file")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, off)
    if version != _FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(raw[off: off + hlen].decode("utf-8"))
    off += hlen

    weights, biases = [], []
    for in_dim, out_dim in header["dims"]:
        w_bytes = 8 * in_dim * out_dim
        w = np.frombuffer(raw, dtype="<f8", count=in_dim * out_dim, offset=off)
        off += w_bytes
        b = np.frombuffer(raw, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        weights.append(w.reshape(out_dim, in_dim).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(raw):
        raise DataFormatError(f"{path}: trailing bytes after weight payload")
    params = NetworkParams(weights, biases, tuple(header["activations"]))
    g = header["gate"]
    gate = DropoutGate(position=g["position"], p=g["p"], convention=g["convention"])
    return params, gate

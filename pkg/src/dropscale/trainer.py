"""Mini-batch dropout training with SGD-momentum and Adam.

Every example gets a fresh Bernoulli keep mask per presentation, the
validation error is measured after each epoch with uniform weight
scaling, and the best-scoring epoch's parameters are returned.  All
randomness derives from the config seed, so identical configs reproduce
bit-identical checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import DivergenceError
from .inference import classification_error, predict_weight_scaled
from .network import (PLAIN, DropoutGate, LayerSpec, Masked, NetworkParams,
                      backprop_params, forward, validate_layer_specs)
from .tensor import RngStream, bernoulli_mask_block, cross_entropy_batch

OPTIMIZERS = ("sgd_momentum", "adam")


@dataclass
class TrainConfig:
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("Adam epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("epoch budget cannot be negative")
        if self.early_stop_patience < 1:
            raise ValueError("early-stop patience must be at least 1")


@dataclass
class Checkpoint:
    """Parameter snapshot with the epoch index and its validation error."""

    params: NetworkParams
    epoch: int
    val_error: float


class SgdMomentum:
    """Momentum update: v <- mu v + g, then x <- x - lr v, per array."""

    def __init__(self, arrays: Sequence[np.ndarray], learning_rate: float,
                 momentum: float):
        self.lr = float(learning_rate)
        self.mu = float(momentum)
        self.velocity = [np.zeros_like(a) for a in arrays]

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        for a, v, g in zip(arrays, self.velocity, grads):
            v *= self.mu
            v += g
            a -= self.lr * v


class Adam:
    """Adam with the standard bias-corrected first and second moments."""

    def __init__(self, arrays: Sequence[np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, m, v, g in zip(arrays, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(cfg: TrainConfig, arrays):
    if cfg.optimizer == "adam":
        return Adam(arrays, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                    cfg.adam_eps)
    return SgdMomentum(arrays, cfg.learning_rate, cfg.momentum)


def init_params(specs: Sequence[LayerSpec], seed: int) -> NetworkParams:
    """Fan-in-scaled normal weights (sigma = sqrt(2/in_dim)), zero biases.

    Each layer draws from its own derived substream, so inserting a layer
    never perturbs the draws of the others.
    """
    specs = list(specs)
    validate_layer_specs(specs)
    rng = RngStream(seed)
    weights, biases = [], []
    for i, spec in enumerate(specs):
        sigma = np.sqrt(2.0 / spec.in_dim)
        w = sigma * rng.derive("init", i).normals((spec.out_dim, spec.in_dim))
        weights.append(w)
        biases.append(np.zeros(spec.out_dim))
    return NetworkParams(weights, biases, tuple(s.activation for s in specs))


def train(specs: Sequence[LayerSpec], gate: DropoutGate, train_set, val_set,
          cfg: TrainConfig, log_sink=None) -> Checkpoint:
    """Shuffled mini-batch training; returns the best-on-validation epoch.

    The freshly initialized network counts as epoch 0, so even
    ``max_epochs=0`` yields one evaluated checkpoint.  Validation error
    uses uniform weight scaling, gradients are averaged over the batch,
    and training stops once `early_stop_patience` epochs pass without a
    new best.  With p=1 mask sampling is skipped entirely (the RNG is
    untouched and forwards run in plain mode).  `log_sink`, when given,
    receives CSV lines "epoch,train_loss,val_error".  A non-finite batch
    loss aborts with a DivergenceError carrying the per-epoch history.
    """
    X = np.asarray(train_set.features, dtype=np.float64)
    y = np.asarray(train_set.labels)
    Xv = np.asarray(val_set.features, dtype=np.float64)
    yv = np.asarray(val_set.labels)
    if X.shape[0] == 0 or Xv.shape[0] == 0:
        raise ValueError("training and validation sets must be non-empty")

    params = init_params(specs, cfg.seed)
    n_gate = params.gated_width(gate)
    opt = _make_optimizer(cfg, params.weights + params.biases)
    rng = RngStream(cfg.seed)
    skip_masks = gate.p == 1.0

    def val_error():
        return classification_error(predict_weight_scaled(params, gate, Xv), yv)

    if log_sink is not None:
        log_sink.write("epoch,train_loss,val_error\n")

    best = Checkpoint(params.copy(), 0, val_error())
    history: List[tuple] = []
    epochs_since_best = 0
    m = X.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.derive("shuffle", epoch).permutation(m)
        masks = None
        if not skip_masks:
            masks = bernoulli_mask_block(rng.derive("masks", epoch), "example",
                                         m, n_gate, gate.p)
        loss_total = 0.0
        for start in range(0, m, cfg.batch_size):
            pick = order[start:start + cfg.batch_size]
            mode = PLAIN if skip_masks else Masked(masks[start:start + len(pick)])
            probs, cache = forward(params, gate, mode, X[pick])
            batch_loss = float(cross_entropy_batch(probs, y[pick]).sum())
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite training loss in epoch {epoch}", trace=history)
            loss_total += batch_loss
            dws, dbs = backprop_params(cache, y[pick])
            inv = 1.0 / len(pick)
            grads = [g * inv for g in dws + dbs]
            opt.step(params.weights + params.biases, grads)

        train_loss = loss_total / m
        err = val_error()
        history.append((epoch, train_loss, err))
        if log_sink is not None:
            log_sink.write(f"{epoch},{train_loss!r},{err!r}\n")
        if err < best.val_error:
            best = Checkpoint(params.copy(), epoch, err)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.early_stop_patience:
                break
    return best

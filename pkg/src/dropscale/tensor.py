"""Dense vector/matrix primitives and a counter-based deterministic RNG.

Vectors are 1-D float64 numpy arrays, matrices 2-D row-major float64
arrays.  All randomness flows through :class:`RngStream`, a splittable
counter-based generator: identical ``(base_seed, stream_id, call
sequence)`` gives bit-identical output on every platform, and derived
streams are domain-separated so adding a consumer never perturbs the
draws of existing ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatchError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_STREAM_TWEAK = np.uint64(0x6A09E667F3BCC909)
_U64 = np.uint64


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        x ^= x >> _U64(30)
        x *= _U64(0xBF58476D1CE4E5B9)
        x ^= x >> _U64(27)
        x *= _U64(0x94D049BB133111EB)
        x ^= x >> _U64(31)
    return x


@lru_cache(maxsize=None)
def _label64(purpose: str) -> np.uint64:
    """64-bit label for a purpose string (little-endian blake2b digest)."""
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return _U64(int.from_bytes(digest, "little"))


def _child_stream_ids(stream_id: np.uint64, purpose: str, index) -> np.ndarray:
    """Domain-separated child stream ids: mix(mix(parent ^ label) + GOLDEN*index)."""
    base = _mix64(np.asarray(stream_id ^ _label64(purpose), dtype=np.uint64))
    with np.errstate(over="ignore"):
        return _mix64(base + _GOLDEN * np.asarray(index, dtype=np.uint64))


@dataclass
class RngStream:
    """Splittable counter-based random stream (SplitMix64 core).

    The stream is value-like: clone (``dataclasses.replace``) per worker
    rather than sharing one instance mutably.  ``derive`` returns a fresh
    stream whose id is a hash of the purpose string, the index, and the
    parent id, so consumers never collide.
    """

    base_seed: int
    stream_id: int = 0
    _pos: int = field(default=0, repr=False)

    def _state_word(self) -> np.uint64:
        seed = _mix64(np.asarray(self.base_seed, dtype=np.uint64))
        tagged = _mix64(np.asarray(_U64(self.stream_id) ^ _STREAM_TWEAK, dtype=np.uint64))
        return _mix64(np.asarray(seed ^ tagged, dtype=np.uint64))[()]

    def derive(self, purpose: str, index: int = 0) -> "RngStream":
        child = _child_stream_ids(_U64(self.stream_id), purpose, index)[()]
        return RngStream(self.base_seed, int(child))

    def words(self, count: int) -> np.ndarray:
        """Next `count` raw 64-bit words; advances the counter."""
        with np.errstate(over="ignore"):
            ctr = _U64(self._pos) + np.arange(count, dtype=np.uint64)
            out = _mix64(self._state_word() + _GOLDEN * ctr)
        self._pos += count
        return out

    def uniforms(self, shape) -> np.ndarray:
        """Uniform float64 draws in [0, 1) with 53-bit resolution."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.words(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller on paired uniforms."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[:pairs]))  # 1-u in (0,1], log finite
        theta = 2.0 * np.pi * u[pairs:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of raw words)."""
        return np.argsort(self.words(n), kind="stable")


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matvec(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Matrix-vector product ``w @ z`` with explicit shape checking."""
    w = as_matrix(w, "matvec matrix")
    z = as_vector(z, "matvec vector")
    if w.shape[1] != z.shape[0]:
        raise DimensionMismatchError(
            f"matvec: matrix has {w.shape[1]} columns but vector has length {z.shape[0]}"
        )
    return w @ z


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    a = as_vector(a, "hadamard lhs")
    b = as_vector(b, "hadamard rhs")
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"hadamard: lengths differ ({a.shape[0]} vs {b.shape[0]})"
        )
    return a * b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax (max subtraction); rows sum to exactly 1 after renormalization.

    Accepts a vector or a batch of row vectors.
    """
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax, ``x - max(x) - log(sum(exp(x - max(x))))``."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """Negative log-likelihood of `label` under `probs` (clamped below at 1e-300)."""
    p = as_vector(probs, "probability vector")
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return float(-np.log(max(p[label], 1e-300)))


def cross_entropy_batch(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row negative log-likelihood for a batch of distributions."""
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    picked = p[np.arange(p.shape[0]), labels]
    return -np.log(np.maximum(picked, 1e-300))


def bernoulli_mask(rng: RngStream, n: int, p: float) -> np.ndarray:
    """Length-n {0,1} keep mask; entry is 1 with probability p.

    Deterministic in (base_seed, stream_id): the same stream always yields
    the same mask.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"keep probability must lie in [0, 1], got {p}")
    return (rng.uniforms(n) < p).astype(np.float64)


def bernoulli_mask_block(rng: RngStream, purpose: str, count: int, n: int, p: float) -> np.ndarray:
    """(count, n) mask block; row k equals bernoulli_mask(rng.derive(purpose, k), n, p).

    Vectorized across rows so large sample counts stay cheap; growing
    `count` never changes earlier rows.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"keep probability must lie in [0, 1], got {p}")
    child_ids = _child_stream_ids(_U64(rng.stream_id), purpose, np.arange(count, dtype=np.uint64))
    seed = _mix64(np.asarray(rng.base_seed, dtype=np.uint64))
    tagged = _mix64(child_ids ^ _STREAM_TWEAK)
    state = _mix64(seed ^ tagged)
    with np.errstate(over="ignore"):
        words = _mix64(state[:, None] + _GOLDEN * np.arange(n, dtype=np.uint64)[None, :])
    u = (words >> _U64(11)).astype(np.float64) * (2.0 ** -53)
    return (u < p).astype(np.float64)

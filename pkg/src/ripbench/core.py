"""Shared numeric primitives: softmax, argmax, probability clamping, RNG streams.

Everything in this module is pure and stateless except :class:`RngStream`,
which wraps a counter-based generator so that every consumer of randomness
(trials, batches, augmentation, ...) can own an independent, reproducible
stream derived from a single master seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Probabilities are clamped to at least this value before any logarithm.
PROB_EPS = 1e-12


def clamp_probs(p: np.ndarray) -> np.ndarray:
    """Clamp probabilities away from zero so that log(p) stays finite."""
    return np.clip(p, PROB_EPS, None)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Raises ValueError if any entry is NaN or infinite.
    """
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_label(p: np.ndarray) -> int:
    """Index of the maximal entry; ties broken by the lowest index."""
    return int(np.argmax(np.asarray(p)))


def argmax_labels(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax for a (n, K) array of probability vectors."""
    return np.argmax(np.asarray(p), axis=-1)


def is_prob_vector(p: np.ndarray, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(
        np.all(np.isfinite(p))
        and np.all(p >= -atol)
        and abs(p.sum() - 1.0) <= atol
    )


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    """One-hot encode integer labels into rows of length ``k``."""
    return np.eye(k)[np.asarray(labels, dtype=int)]


@dataclass
class ModelParams:
    """Weights and bias of a linear-softmax classifier.

    The same structure serves three roles during adaptation: the frozen
    source model, the trainable student, and the deployed teacher.
    """

    W: np.ndarray  # (K, d)
    b: np.ndarray  # (K,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.ndim != 1 or self.W.shape[0] != self.b.shape[0]:
            raise ValueError("ModelParams: W must be (K, d) and b (K,)")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("ModelParams: entries must be finite")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.W.T + self.b

    def copy(self) -> "ModelParams":
        return ModelParams(self.W.copy(), self.b.copy())

    @classmethod
    def zeros(cls, k: int, d: int) -> "ModelParams":
        return cls(np.zeros((k, d)), np.zeros(k))


@dataclass
class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Two streams constructed with equal identifiers produce identical draw
    sequences.  ``child(stream_id)`` derives a further independent stream,
    which keeps trials, batches, and augmentation noise decoupled.
    """

    seed: int
    stream_id: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        """Derive an independent stream from this stream's seed."""
        mixed = (int(self.stream_id) * 1_000_003 + int(stream_id) + 1) % (2**64)
        return RngStream(self.seed, mixed)

    # Thin passthroughs so call sites read naturally.
    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return scale * self.gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

"""Self-training losses and their analytic gradients with respect to logits.

All losses consume probability vectors; ``loss_grad_logits`` additionally
differentiates through the softmax so the adaptation engine never needs
autodiff.  Gradients are derived by the chain rule

    dL/dz = q * (g - (q . g))        where q = softmax(z), g = dL/dq,

vectorized over the last axis so batched ``(n, K)`` inputs work too.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import clamp_probs, softmax


class LossKind(str, Enum):
    ENT = "Ent"
    CE = "CE"
    SCE = "SCE"
    SLR = "SLR"
    RMT = "RMT"


#: Losses that never look at a pseudo-label (entropy-style objectives).
AUGMENTING_FREE = frozenset({LossKind.ENT, LossKind.SLR})


@dataclass
class LossEval:
    """Loss value (nats) plus its gradient with respect to the logits."""

    value: float
    grad_logits: np.ndarray


def ent_loss(q: np.ndarray) -> float:
    """Shannon entropy of the prediction: -sum q log q."""
    q = np.asarray(q, dtype=float)
    return float(-(q * np.log(clamp_probs(q))).sum(axis=-1).mean())


def ce_loss(p: np.ndarray, q: np.ndarray) -> float:
    """Cross entropy -sum p log q; p is a constant target."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(-(p * np.log(clamp_probs(q))).sum(axis=-1).mean())


def sce_loss(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric cross entropy: the mean of CE(p, q) and CE(q, p)."""
    return 0.5 * (ce_loss(p, q) + ce_loss(q, p))


def slr_loss(p: np.ndarray, q: np.ndarray, w: float | np.ndarray = 1.0) -> float:
    """Soft likelihood ratio: -w * sum_j p_j log(q_j / sum_{j' != j} q_j').

    Unlike cross entropy this rewards confident correct predictions with
    negative values, so it keeps pulling even once CE has saturated.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ratio = np.log(clamp_probs(q)) - np.log(clamp_probs(1.0 - q))
    per_sample = -(p * ratio).sum(axis=-1)
    return float((np.asarray(w) * per_sample).mean())


def rmt_loss(p: np.ndarray, q_clean: np.ndarray, q_aug: np.ndarray) -> float:
    """Mean of the symmetric cross entropy over the clean and augmented branches."""
    return 0.5 * (sce_loss(p, q_clean) + sce_loss(p, q_aug))


def _chain(q: np.ndarray, grad_q: np.ndarray) -> np.ndarray:
    """Push a gradient w.r.t. probabilities through the softmax Jacobian."""
    inner = (q * grad_q).sum(axis=-1, keepdims=True)
    return q * (grad_q - inner)


def grad_logits(kind: LossKind, p: np.ndarray | None, q: np.ndarray,
                w: float | np.ndarray = 1.0) -> np.ndarray:
    """Gradient of the chosen loss w.r.t. the logits that produced ``q``.

    Works on single vectors or batches (last axis = classes); batched
    gradients are per-sample (callers average them).
    """
    q = np.asarray(q, dtype=float)
    kind = LossKind(kind)
    if kind != LossKind.ENT and p is None:
        raise ValueError(f"loss kind {kind.value} requires a target p")
    if kind == LossKind.CE:
        return q - np.asarray(p, dtype=float)
    if kind == LossKind.ENT:
        gq = -(np.log(clamp_probs(q)) + 1.0)
        return _chain(q, gq)
    if kind == LossKind.SCE:
        p = np.asarray(p, dtype=float)
        gq = -0.5 * (p / clamp_probs(q) + np.log(clamp_probs(p)))
        return _chain(q, gq)
    if kind == LossKind.SLR:
        p = np.asarray(p, dtype=float)
        qc = clamp_probs(q)
        s = clamp_probs(1.0 - q)
        gq = -(p / qc) + ((p / s).sum(axis=-1, keepdims=True) - p / s)
        g = _chain(q, gq)
        w = np.asarray(w, dtype=float)
        if w.ndim > 0:
            return g * w[..., None]
        return g * w
    if kind == LossKind.RMT:
        # Degenerate single-branch form: both branches see the same logits.
        p = np.asarray(p, dtype=float)
        gq = -0.5 * (p / clamp_probs(q) + np.log(clamp_probs(p)))
        return _chain(q, gq)
    raise ValueError(f"unknown loss kind: {kind}")


def loss_value(kind: LossKind, p: np.ndarray | None, q: np.ndarray,
               w: float | np.ndarray = 1.0) -> float:
    kind = LossKind(kind)
    if kind == LossKind.ENT:
        return ent_loss(q)
    if kind != LossKind.ENT and p is None:
        raise ValueError(f"loss kind {kind.value} requires a target p")
    if kind == LossKind.CE:
        return ce_loss(p, q)
    if kind == LossKind.SCE:
        return sce_loss(p, q)
    if kind == LossKind.SLR:
        return slr_loss(p, q, w)
    if kind == LossKind.RMT:
        return rmt_loss(p, q, q)
    raise ValueError(f"unknown loss kind: {kind}")


def loss_grad_logits(kind: LossKind, p: np.ndarray | None, z: np.ndarray,
                     w: float | np.ndarray = 1.0) -> LossEval:
    """Evaluate a loss and its analytic gradient at logits ``z``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("loss_grad_logits: logits must be finite")
    q = softmax(z)
    return LossEval(value=loss_value(kind, p, q, w),
                    grad_logits=grad_logits(kind, p, q, w))

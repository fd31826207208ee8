"""Continual test-time adaptation engine.

A linear-softmax student is updated by Adam on a self-training loss over each
incoming batch; a teacher model (an EMA of the student, or a convex blend with
the frozen source weights) produces the deployed predictions and the hard
pseudo-labels.  Defenses (L2-to-source regularization, source replay, source
weight ensembling) hang off the same update.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugConfig, awgn
from .core import ModelParams, RngStream, argmax_labels, one_hot, softmax
from .losses import AUGMENTING_FREE, LossKind, grad_logits, loss_value


@dataclass
class OptimizerState:
    """Adam accumulators for one ModelParams-shaped parameter set."""

    m_W: np.ndarray
    v_W: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(np.zeros_like(params.W), np.zeros_like(params.W),
                   np.zeros_like(params.b), np.zeros_like(params.b))


def optimizer_step(opt: OptimizerState, params: ModelParams, grad_W: np.ndarray,
                   grad_b: np.ndarray, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> tuple[OptimizerState, ModelParams]:
    """One bias-corrected Adam step; returns new optimizer state and params."""
    if grad_W.shape != params.W.shape or grad_b.shape != params.b.shape:
        raise ValueError("optimizer_step: gradient shape mismatch")
    t = opt.t + 1
    m_W = beta1 * opt.m_W + (1 - beta1) * grad_W
    v_W = beta2 * opt.v_W + (1 - beta2) * grad_W ** 2
    m_b = beta1 * opt.m_b + (1 - beta1) * grad_b
    v_b = beta2 * opt.v_b + (1 - beta2) * grad_b ** 2
    mh_W = m_W / (1 - beta1 ** t)
    vh_W = v_W / (1 - beta2 ** t)
    mh_b = m_b / (1 - beta1 ** t)
    vh_b = v_b / (1 - beta2 ** t)
    new = ModelParams(params.W - lr * mh_W / (np.sqrt(vh_W) + eps),
                      params.b - lr * mh_b / (np.sqrt(vh_b) + eps))
    return OptimizerState(m_W, v_W, m_b, v_b, t), new


def ema_update(teacher: ModelParams, student: ModelParams,
               alpha: float) -> ModelParams:
    """Mean-teacher blend: alpha * teacher + (1 - alpha) * student."""
    if teacher.W.shape != student.W.shape:
        raise ValueError("ema_update: shape mismatch")
    return ModelParams(alpha * teacher.W + (1 - alpha) * student.W,
                       alpha * teacher.b + (1 - alpha) * student.b)


def source_ensemble_update(source: ModelParams, student: ModelParams,
                           alpha: float) -> ModelParams:
    """Source-anchored blend: alpha * source + (1 - alpha) * student."""
    if source.W.shape != student.W.shape:
        raise ValueError("source_ensemble_update: shape mismatch")
    return ModelParams(alpha * source.W + (1 - alpha) * student.W,
                       alpha * source.b + (1 - alpha) * student.b)


@dataclass
class SrcReplayConfig:
    """Mix m labeled source samples into every adaptation step."""

    features: np.ndarray
    labels: np.ndarray
    m: int = 32


@dataclass
class TtaConfig:
    loss: LossKind = LossKind.CE
    predictor: str = "teacher"  # teacher | student
    aug: AugConfig = field(default_factory=lambda: AugConfig(sigma=0.3, enabled=True))
    alpha: float = 0.99
    update_scheme: str = "mean_teacher"  # mean_teacher | source_ensemble
    lam: float = 0.0
    lr: float = 1e-3
    src_replay: SrcReplayConfig | None = None
    slr_weight: float = 1.0
    # Entropy-style objectives ship with redundancy-aware sample weighting:
    # each sample is weighted by one minus the cosine similarity between its
    # prediction and a running mean of recent predictions, and batches whose
    # mean weight falls below skip_tau are skipped outright.  "auto" enables
    # this for the augmenting-free losses (Ent, SLR) only.
    diversity_weighting: str = "auto"  # auto | on | off
    div_momentum: float = 0.9
    skip_tau: float = 0.35

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("TtaConfig: alpha must be in [0, 1]")
        if self.lam < 0:
            raise ValueError("TtaConfig: lambda must be >= 0")
        if self.predictor not in ("teacher", "student"):
            raise ValueError("TtaConfig: predictor must be teacher|student")
        if self.update_scheme not in ("mean_teacher", "source_ensemble"):
            raise ValueError("TtaConfig: unknown update scheme")

    def uses_diversity(self) -> bool:
        if self.diversity_weighting == "on":
            return True
        if self.diversity_weighting == "off":
            return False
        return self.loss in AUGMENTING_FREE


@dataclass
class AdaptState:
    student: ModelParams
    teacher: ModelParams
    source: ModelParams
    opt: OptimizerState
    t: int = 0
    last_loss: float = float("nan")
    pred_ema: np.ndarray | None = None  # running mean prediction (diversity weighting)

    @classmethod
    def init(cls, source: ModelParams) -> "AdaptState":
        return cls(student=source.copy(), teacher=source.copy(),
                   source=source.copy(), opt=OptimizerState.zeros(source))


def predict(state: AdaptState, x: np.ndarray) -> np.ndarray:
    """Deployed (teacher) probabilities for one sample or a batch."""
    return softmax(state.teacher.logits(x))


def predict_labels(state: AdaptState, x: np.ndarray) -> np.ndarray:
    return argmax_labels(softmax(state.teacher.logits(np.atleast_2d(x))))


def pseudo_labels(state: AdaptState, batch: np.ndarray,
                  predictor: str = "teacher") -> np.ndarray:
    """Hard one-hot pseudo-labels from the chosen model on the clean batch."""
    model = state.teacher if predictor == "teacher" else state.student
    q = softmax(model.logits(np.atleast_2d(batch)))
    k = model.n_classes
    return one_hot(argmax_labels(q), k)


def _batch_gradient(state: AdaptState, batch: np.ndarray, cfg: TtaConfig,
                    rng: RngStream):
    """Gradient of the self-training loss w.r.t. student W and b.

    Returns (grad_W, grad_b, loss value, new prediction EMA, skip flag);
    skip means the batch was judged too redundant to train on.
    """
    k = state.student.n_classes
    n = len(batch)
    x_aug = awgn(batch, cfg.aug, rng) if cfg.aug.enabled else batch
    q_aug = softmax(state.student.logits(x_aug))
    pred_ema = state.pred_ema

    if cfg.loss == LossKind.ENT:
        gz = grad_logits(LossKind.ENT, None, q_aug)
        value = loss_value(LossKind.ENT, None, q_aug)
    else:
        targets = pseudo_labels(state, batch, cfg.predictor)
        if cfg.loss == LossKind.RMT:
            q_clean = softmax(state.student.logits(batch))
            gz_aug = grad_logits(LossKind.SCE, targets, q_aug)
            gz_clean = grad_logits(LossKind.SCE, targets, q_clean)
            value = 0.5 * (loss_value(LossKind.SCE, targets, q_clean)
                           + loss_value(LossKind.SCE, targets, q_aug))
            grad_W = 0.5 * (gz_aug.T @ x_aug + gz_clean.T @ batch) / n
            grad_b = 0.5 * (gz_aug + gz_clean).sum(axis=0) / n
            return grad_W, grad_b, value, pred_ema, False
        gz = grad_logits(cfg.loss, targets, q_aug, cfg.slr_weight)
        value = loss_value(cfg.loss, targets, q_aug, cfg.slr_weight)

    if cfg.uses_diversity():
        qbar = pred_ema if pred_ema is not None else np.full(k, 1.0 / k)
        cos = (q_aug @ qbar) / (np.linalg.norm(q_aug, axis=1)
                                * np.linalg.norm(qbar) + 1e-12)
        w = 1.0 - cos
        pred_ema = (cfg.div_momentum * qbar
                    + (1 - cfg.div_momentum) * q_aug.mean(axis=0))
        if w.mean() < cfg.skip_tau:
            return None, None, value, pred_ema, True
        gz = gz * w[:, None]

    grad_W = gz.T @ x_aug / n
    grad_b = gz.sum(axis=0) / n
    return grad_W, grad_b, value, pred_ema, False


def adapt_step(state: AdaptState, batch: np.ndarray, cfg: TtaConfig,
               rng: RngStream) -> tuple[AdaptState, np.ndarray]:
    """One adaptation step.

    Returns the new state together with the predictions of the pre-update
    deployed model on the clean batch (what a querying client observes).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.size == 0:
        raise ValueError("adapt_step: empty batch")
    preds = predict_labels(state, batch)

    grad_W, grad_b, value, pred_ema, skip = _batch_gradient(state, batch, cfg, rng)
    if skip:
        new_state = replace(state, t=state.t + 1, last_loss=value,
                            pred_ema=pred_ema)
        return new_state, preds

    if cfg.lam > 0:
        grad_W = grad_W + 2 * cfg.lam * (state.student.W - state.source.W)
        grad_b = grad_b + 2 * cfg.lam * (state.student.b - state.source.b)
    if cfg.src_replay is not None:
        rep = cfg.src_replay
        idx = rng.gen.integers(0, len(rep.features), rep.m)
        xs = rep.features[idx]
        qs = softmax(state.student.logits(xs))
        gs = (qs - one_hot(rep.labels[idx], state.student.n_classes)) / rep.m
        grad_W = grad_W + gs.T @ xs
        grad_b = grad_b + gs.sum(axis=0)

    opt, student = optimizer_step(state.opt, state.student, grad_W, grad_b, cfg.lr)
    if cfg.update_scheme == "source_ensemble":
        teacher = source_ensemble_update(state.source, student, cfg.alpha)
    else:
        teacher = ema_update(state.teacher, student, cfg.alpha)

    new_state = replace(state, student=student, teacher=teacher, opt=opt,
                        t=state.t + 1, last_loss=value, pred_ema=pred_ema)
    return new_state, preds


class TtaModel:
    """Stateful convenience wrapper around adapt_step for one victim lifetime."""

    def __init__(self, source: ModelParams, cfg: TtaConfig, rng: RngStream):
        self.cfg = cfg
        self.rng = rng
        self.state = AdaptState.init(source)

    def adapt(self, batch: np.ndarray) -> np.ndarray:
        """Adapt on a batch; returns the pre-update deployed predictions."""
        self.state, preds = adapt_step(self.state, batch, self.cfg, self.rng)
        return preds

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Deployed predictions without adaptation (experimenter access)."""
        return predict_labels(self.state, x)

    def reset(self) -> None:
        self.state = AdaptState.init(self.state.source)

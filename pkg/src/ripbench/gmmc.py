"""One-dimensional two-component Gaussian mixture classifier simulation.

The simulation tracks a student/teacher pair of mixture parameters.  Each
step draws an adaptation batch (optionally through incorrect-prediction
sampling), augments it with AWGN, pseudo-labels the augmented points with the
teacher's posterior, re-estimates per-class moments, and blends both models
by EMA.  The collapse mechanism lives in the pseudo-labeling of augmented
points: noise pushes victim samples across the boundary, the wrongly labeled
copies drag the victim component's moments, and the boundary sweeps through
the victim class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .augment import AugConfig
from .core import RngStream, clamp_probs
from .metrics import RunRecord, classwise_error, prediction_marginal

VAR_FLOOR = 1e-3


@dataclass
class GmmcParams:
    priors: np.ndarray  # (2,)
    means: np.ndarray  # (2,)
    variances: np.ndarray  # (2,)

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if abs(self.priors.sum() - 1.0) > 1e-9 or np.any(self.priors < 0):
            raise ValueError("GmmcParams: priors must lie on the simplex")
        if np.any(self.variances < VAR_FLOOR):
            raise ValueError(f"GmmcParams: variances must be >= {VAR_FLOOR}")

    def copy(self) -> "GmmcParams":
        return GmmcParams(self.priors.copy(), self.means.copy(),
                          self.variances.copy())

    @classmethod
    def default(cls) -> "GmmcParams":
        return cls(np.array([0.5, 0.5]), np.array([-1.0, 2.0]),
                   np.array([1.0, 1.0]))


@dataclass
class GmmcSimConfig:
    n_pool: int = 1000
    steps: int = 120
    alpha: float = 0.9
    aug: AugConfig = field(default_factory=lambda: AugConfig(sigma=0.2, enabled=True))
    ips_enabled: bool = True
    batch: int = 64
    victim_class: int = 0
    eval_every: int = 1
    # IPS draws candidate samples and keeps the mispredicted victim-class
    # ones; the candidate pool is this multiple of the batch size.
    candidate_factor: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("GmmcSimConfig: alpha must be in [0, 1]")
        if self.batch < 1 or self.eval_every < 1:
            raise ValueError("GmmcSimConfig: batch and eval_every must be >= 1")


def gmmc_posterior(params: GmmcParams, x) -> np.ndarray:
    """Bayes posterior p(k | x); accepts a scalar or an array of points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    logp = (np.log(clamp_probs(params.priors))
            - 0.5 * np.log(2 * np.pi * params.variances)
            - 0.5 * (x - params.means) ** 2 / params.variances)
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if p.shape[0] == 1 else p


def gmmc_boundary(params: GmmcParams, lo: float = -10.0, hi: float = 10.0) -> float:
    """The x between the component means where the posterior crosses 0.5.

    Returns NaN when no crossing exists in [lo, hi].
    """
    xs = np.linspace(lo, hi, 4001)
    p0 = np.atleast_2d(gmmc_posterior(params, xs))[:, 0]
    sign = np.sign(p0 - 0.5)
    idx = np.nonzero(np.diff(sign))[0]
    if len(idx) == 0:
        return float("nan")
    i = idx[0]
    # linear interpolation between grid neighbours
    x0, x1, y0, y1 = xs[i], xs[i + 1], p0[i] - 0.5, p0[i + 1] - 0.5
    return float(x0 - y0 * (x1 - x0) / (y1 - y0)) if y1 != y0 else float(xs[i])


def gmmc_fit_step(params: GmmcParams, batch: np.ndarray, alpha: float,
                  aug: AugConfig, rng: RngStream,
                  label_params: GmmcParams | None = None) -> GmmcParams:
    """One EM-style refit blended into the old parameters by EMA.

    Training points are AWGN-augmented copies of the batch, pseudo-labeled
    at the augmented location by the posterior of ``label_params`` (the
    deployed model; defaults to ``params``).  Classes with no assigned points
    keep their old moments; priors are re-estimated only when every class
    received points (otherwise they are kept, the same guard applied
    per-class to the moments).
    """
    batch = np.atleast_1d(np.asarray(batch, dtype=float))
    if batch.size == 0:
        raise ValueError("gmmc_fit_step: empty batch")
    labeler = label_params if label_params is not None else params
    sigma = aug.sigma if aug.enabled else 0.0
    x_t = batch + sigma * rng.gen.standard_normal(batch.shape)
    labels = np.atleast_2d(gmmc_posterior(labeler, x_t)).argmax(axis=1)

    priors = params.priors.copy()
    means = params.means.copy()
    variances = params.variances.copy()
    counts = np.array([(labels == k).sum() for k in (0, 1)])
    for k in (0, 1):
        sel = x_t[labels == k]
        if len(sel) == 0:
            continue
        est_var = sel.var() if len(sel) > 1 else variances[k]
        means[k] = alpha * means[k] + (1 - alpha) * sel.mean()
        variances[k] = max(alpha * variances[k] + (1 - alpha) * est_var, VAR_FLOOR)
    if counts.min() > 0:
        priors = alpha * priors + (1 - alpha) * counts / counts.sum()
        priors = priors / priors.sum()
    return GmmcParams(priors, means, variances)


def _draw_mixture(true: GmmcParams, n: int, rng: RngStream):
    y = rng.gen.integers(0, 2, n)
    x = (true.means[y]
         + np.sqrt(true.variances[y]) * rng.gen.standard_normal(n))
    return x, y


def gmmc_simulate(cfg: GmmcSimConfig, rng: RngStream,
                  true_params: GmmcParams | None = None) -> RunRecord:
    """Run the mixture simulation and record pool marginals per checkpoint.

    With IPS enabled, each step draws candidate samples from the true mixture
    and keeps only victim-class samples the deployed model currently gets
    wrong (up to the batch size); steps with no such candidates do not update.
    With IPS disabled the batch is i.i.d. mixture draws.
    """
    true = true_params.copy() if true_params is not None else GmmcParams.default()
    ya = cfg.victim_class
    pool_x, pool_y = _draw_mixture(true, cfg.n_pool, rng)

    student = true.copy()
    teacher = true.copy()
    record = RunRecord(metadata={"model": "gmmc", "alpha": cfg.alpha,
                                 "sigma": cfg.aug.sigma if cfg.aug.enabled else 0.0,
                                 "ips": cfg.ips_enabled})

    def checkpoint(step: int):
        preds = np.atleast_2d(gmmc_posterior(teacher, pool_x)).argmax(axis=1)
        per_class, avg = classwise_error(preds, pool_y, 2)
        marg = prediction_marginal(preds, 2)
        record.add(step, per_class, avg, marg)
        record.checkpoints[-1].victim_mass = float(marg[ya])
        record.metadata.setdefault("boundaries", []).append(
            gmmc_boundary(teacher))

    checkpoint(0)
    for t in range(1, cfg.steps + 1):
        if cfg.ips_enabled:
            n_cand = cfg.candidate_factor * cfg.batch
            cx, cy = _draw_mixture(true, n_cand, rng)
            preds = np.atleast_2d(gmmc_posterior(teacher, cx)).argmax(axis=1)
            batch = cx[(cy == ya) & (preds != cy)][:cfg.batch]
            if len(batch) == 0:
                if t % cfg.eval_every == 0:
                    checkpoint(t)
                continue
        else:
            batch, _ = _draw_mixture(true, cfg.batch, rng)
        student = gmmc_fit_step(student, batch, cfg.alpha, cfg.aug, rng,
                                label_params=teacher)
        pri = cfg.alpha * teacher.priors + (1 - cfg.alpha) * student.priors
        teacher = GmmcParams(
            pri / pri.sum(),
            cfg.alpha * teacher.means + (1 - cfg.alpha) * student.means,
            np.maximum(cfg.alpha * teacher.variances
                       + (1 - cfg.alpha) * student.variances, VAR_FLOOR))
        if t % cfg.eval_every == 0:
            checkpoint(t)
    return record


def gmmc_record_to_csv(record: RunRecord, path: str) -> None:
    """CSV with columns step, marginal_class0, marginal_class1, boundary_location."""
    boundaries = record.metadata.get("boundaries", [])
    meta = " ".join(f"{k}={v}" for k, v in sorted(record.metadata.items())
                    if k != "boundaries")
    with open(path, "w", newline="") as fh:
        fh.write(f"# {meta}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "marginal_class0", "marginal_class1",
                         "boundary_location"])
        for cp, boundary in zip(record.checkpoints, boundaries):
            writer.writerow([cp.step, repr(float(cp.marginal[0])),
                             repr(float(cp.marginal[1])), repr(float(boundary))])

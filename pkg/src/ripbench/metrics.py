"""Class-wise error, prediction marginals, collapse detection, run records."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


def classwise_error(preds: np.ndarray, truths: np.ndarray,
                    k: int) -> tuple[np.ndarray, float]:
    """Per-class error rates and their unweighted mean.

    Classes absent from ``truths`` get NaN and are excluded from the mean.
    """
    preds = np.asarray(preds, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if len(preds) != len(truths):
        raise ValueError("classwise_error: length mismatch")
    per_class = np.full(k, np.nan)
    for c in range(k):
        mask = truths == c
        if mask.any():
            per_class[c] = float((preds[mask] != c).mean())
    represented = ~np.isnan(per_class)
    avg = float(per_class[represented].mean()) if represented.any() else float("nan")
    return per_class, avg


def prediction_marginal(preds: np.ndarray, k: int) -> np.ndarray:
    """Empirical distribution of predicted labels over k classes."""
    preds = np.asarray(preds, dtype=int)
    counts = np.bincount(preds, minlength=k).astype(float)
    return counts / counts.sum()


def collapse_detect(marginals: list[np.ndarray], subset: set[int],
                    epsilon: float = 0.01, window: int = 3) -> bool:
    """True iff the subset's marginal mass stays below epsilon for the
    last ``window`` consecutive checkpoints."""
    if not 0 < epsilon < 1:
        raise ValueError("collapse_detect: epsilon must be in (0, 1)")
    if window > len(marginals):
        raise ValueError("collapse_detect: window exceeds series length")
    idx = sorted(subset)
    tail = marginals[-window:]
    return all(float(np.asarray(m)[idx].sum()) < epsilon for m in tail)


def spearman_corr(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1, dtype=float)
        # average tied ranks
        for u in np.unique(v):
            mask = v == u
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


@dataclass
class Checkpoint:
    step: int
    per_class_error: np.ndarray
    avg_error: float
    marginal: np.ndarray
    trial: int = 0
    victim_mass: float = float("nan")


@dataclass
class RunRecord:
    """Time series of evaluation checkpoints plus run metadata."""

    checkpoints: list[Checkpoint] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, step: int, per_class: np.ndarray, avg: float,
            marginal: np.ndarray, trial: int = 0) -> None:
        if self.checkpoints and self.checkpoints[-1].trial == trial:
            if step <= self.checkpoints[-1].step:
                raise ValueError("RunRecord: steps must be strictly increasing")
        self.checkpoints.append(Checkpoint(step, np.asarray(per_class),
                                           float(avg), np.asarray(marginal), trial))

    def final_avg_error(self, trial: int | None = None) -> float:
        cps = [c for c in self.checkpoints if trial is None or c.trial == trial]
        return cps[-1].avg_error

    def mean_avg_error(self, trial: int | None = None) -> float:
        cps = [c for c in self.checkpoints if trial is None or c.trial == trial]
        return float(np.mean([c.avg_error for c in cps]))

    def trials(self) -> list[int]:
        return sorted({c.trial for c in self.checkpoints})

    def mean_final_error(self) -> float:
        """Final avg error averaged across trials."""
        return float(np.mean([self.final_avg_error(t) for t in self.trials()]))

    def mean_mean_error(self) -> float:
        """Across-checkpoint mean error averaged across trials."""
        return float(np.mean([self.mean_avg_error(t) for t in self.trials()]))

    def marginal_series(self, trial: int = 0) -> list[np.ndarray]:
        return [c.marginal for c in self.checkpoints if c.trial == trial]

    def to_csv(self, path: str, victim_class: int | None = None) -> None:
        """Write checkpoints with a `#`-prefixed metadata header line."""
        meta = " ".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        with open(path, "w", newline="") as fh:
            fh.write(f"# {meta}\n")
            writer = csv.writer(fh)
            writer.writerow(["trial", "step", "avg_classwise_error",
                             "victim_class_marginal"])
            for c in self.checkpoints:
                if victim_class is not None:
                    vm = float(c.marginal[victim_class])
                elif not np.isnan(c.victim_mass):
                    vm = float(c.victim_mass)
                else:
                    vm = float(c.marginal.max())
                writer.writerow([c.trial, c.step, repr(c.avg_error), repr(vm)])

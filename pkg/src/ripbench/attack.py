"""Black-box collapsing attack: reuse of incorrectly predicted victim samples.

The attacker holds a labeled dataset from the deployment domain, submits
batches to the victim, and carries every victim-class sample that came back
mispredicted into the next batch, refilling the remainder with fresh draws.
The victim is only reachable through a single submit-batch capability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .core import RngStream
from .data import LabeledDataset
from .metrics import RunRecord, classwise_error, prediction_marginal


class VictimHandle(Protocol):
    """The attacker's entire view of the victim: submit a batch, get labels."""

    def submit(self, batch: np.ndarray) -> np.ndarray: ...


@dataclass
class AttackConfig:
    T_a: int = 500
    B: int = 64
    y_a: int = 0
    trials: int = 10
    eval_every: int = 25
    # Out-of-band evaluation (experimenter mode): the probe set is scored
    # through a separate oracle without triggering adaptation.  When False,
    # probes are submitted as ordinary queries.
    oracle_eval: bool = True

    def __post_init__(self):
        if self.T_a < 0 or self.B < 1 or self.eval_every < 1:
            raise ValueError("AttackConfig: invalid T_a/B/eval_every")


@dataclass
class AttackState:
    y_a: int
    S_x: np.ndarray  # (B, d) current submission set
    S_y: np.ndarray  # (B,) attacker-known true labels
    I_size: int = 0  # carried-over reuse set size after the last round
    t: int = 0


def ips_filter(features: np.ndarray, truths: np.ndarray, preds: np.ndarray,
               y_a: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep exactly the samples with true label y_a that were mispredicted.

    Order is preserved; returns (features, truths) of the kept samples.
    """
    truths = np.asarray(truths, dtype=int)
    preds = np.asarray(preds, dtype=int)
    if len(truths) != len(preds) or len(features) != len(truths):
        raise ValueError("ips_filter: length mismatch")
    mask = (truths == y_a) & (preds != truths)
    return np.asarray(features)[mask], truths[mask]


def rip_round(state: AttackState, victim: VictimHandle, pool: LabeledDataset,
              rng: RngStream) -> AttackState:
    """Submit the current set, keep mispredicted victim-class samples,
    refill to B with uniform draws (with replacement) from the pool."""
    b = len(state.S_x)
    preds = victim.submit(state.S_x)
    keep_x, keep_y = ips_filter(state.S_x, state.S_y, preds, state.y_a)
    n_fresh = b - len(keep_x)
    idx = rng.gen.integers(0, len(pool), n_fresh)
    s_x = np.concatenate([keep_x, pool.features[idx]])
    s_y = np.concatenate([keep_y, pool.labels[idx]])
    return AttackState(state.y_a, s_x, s_y, I_size=len(keep_x), t=state.t + 1)


def init_attack_state(cfg: AttackConfig, pool: LabeledDataset,
                      rng: RngStream, y_a: int | None = None) -> AttackState:
    idx = rng.gen.integers(0, len(pool), cfg.B)
    return AttackState(cfg.y_a if y_a is None else y_a,
                       pool.features[idx], pool.labels[idx])


def run_attack(victim: VictimHandle, cfg: AttackConfig, pool: LabeledDataset,
               probe: LabeledDataset, rng: RngStream,
               oracle: Callable[[np.ndarray], np.ndarray] | None = None,
               y_a: int | None = None, trial: int = 0,
               record: RunRecord | None = None) -> RunRecord:
    """One attack trial against a freshly initialized victim.

    Victim error on the probe set is recorded before the first round and
    every ``eval_every`` rounds.  With ``cfg.oracle_eval`` an out-of-band
    ``oracle`` callable must be provided; otherwise probes are pushed
    through ``victim.submit`` and adapt the victim like any other query.
    """
    if cfg.oracle_eval and oracle is None:
        raise ValueError("run_attack: oracle_eval requires an oracle callable")
    k = pool.spec.K
    ya = cfg.y_a if y_a is None else y_a
    if record is None:
        record = RunRecord(metadata={"T_a": cfg.T_a, "B": cfg.B})

    def evaluate(step: int):
        if cfg.oracle_eval:
            preds = oracle(probe.features)
        else:
            preds = victim.submit(probe.features)
        per_class, avg = classwise_error(preds, probe.labels, k)
        marg = prediction_marginal(preds, k)
        record.add(step, per_class, avg, marg, trial=trial)
        record.checkpoints[-1].victim_mass = float(marg[ya])

    state = init_attack_state(cfg, pool, rng, y_a=ya)
    evaluate(0)
    for t in range(1, cfg.T_a + 1):
        state = rip_round(state, victim, pool, rng)
        if t % cfg.eval_every == 0:
            evaluate(t)
    return record


def run_no_attack(victim: VictimHandle, cfg: AttackConfig, pool: LabeledDataset,
                  probe: LabeledDataset, rng: RngStream,
                  oracle: Callable[[np.ndarray], np.ndarray] | None = None,
                  trial: int = 0, record: RunRecord | None = None) -> RunRecord:
    """Benign control: the same query budget of i.i.d. pool batches."""
    if cfg.oracle_eval and oracle is None:
        raise ValueError("run_no_attack: oracle_eval requires an oracle callable")
    k = pool.spec.K
    if record is None:
        record = RunRecord(metadata={"T_a": cfg.T_a, "B": cfg.B, "attack": False})

    def evaluate(step: int):
        preds = (oracle(probe.features) if cfg.oracle_eval
                 else victim.submit(probe.features))
        per_class, avg = classwise_error(preds, probe.labels, k)
        record.add(step, per_class, avg, prediction_marginal(preds, k),
                   trial=trial)

    evaluate(0)
    for t in range(1, cfg.T_a + 1):
        idx = rng.gen.integers(0, len(pool), cfg.B)
        victim.submit(pool.features[idx])
        if t % cfg.eval_every == 0:
            evaluate(t)
    return record


def pick_victim_classes(k: int, trials: int, rng: RngStream) -> np.ndarray:
    """Victim classes for successive trials, uniform without replacement
    (cycling through fresh permutations when trials > k)."""
    out = []
    while len(out) < trials:
        out.extend(rng.gen.permutation(k).tolist())
    return np.array(out[:trials], dtype=int)


def run_trials(make_victim: Callable[[int], tuple[VictimHandle, Callable]],
               cfg: AttackConfig, pool: LabeledDataset, probe: LabeledDataset,
               seed: int, attack: bool = True) -> RunRecord:
    """Multi-trial runner.

    ``make_victim(trial)`` must return a freshly initialized victim handle
    plus its out-of-band evaluation oracle.  Each trial gets its own derived
    RNG stream and (for attack runs) its own victim class.
    """
    classes = pick_victim_classes(probe.spec.K, cfg.trials, RngStream(seed, 7))
    record = RunRecord(metadata={"seed": seed, "T_a": cfg.T_a, "B": cfg.B,
                                 "trials": cfg.trials, "attack": attack})
    for trial in range(cfg.trials):
        victim, oracle = make_victim(trial)
        rng = RngStream(seed, 1000 + trial)
        if attack:
            run_attack(victim, cfg, pool, probe, rng, oracle=oracle,
                       y_a=int(classes[trial]), trial=trial, record=record)
        else:
            run_no_attack(victim, cfg, pool, probe, rng, oracle=oracle,
                          trial=trial, record=record)
    record.metadata["victim_classes"] = classes.tolist()
    return record


class SpyVictim:
    """Wrapper that counts interactions, for black-box purity checks."""

    def __init__(self, inner: VictimHandle):
        self._inner = inner
        self.submit_calls = 0

    def submit(self, batch: np.ndarray) -> np.ndarray:
        self.submit_calls += 1
        return self._inner.submit(batch)

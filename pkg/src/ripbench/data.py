"""Synthetic blob datasets with covariate shift, plus source-model training."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import ModelParams, RngStream, one_hot, softmax


@dataclass
class DomainSpec:
    """Gaussian blob domain: K class means in d dimensions plus a shared shift.

    The shift vector is added to every class mean, which models covariate
    shift while preserving the label rule (labels are assigned before noise).
    """

    K: int
    d: int
    class_means: np.ndarray  # (K, d)
    noise_scale: float
    shift: np.ndarray  # (d,)

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=float)
        self.shift = np.asarray(self.shift, dtype=float)
        if self.class_means.shape != (self.K, self.d):
            raise ValueError("DomainSpec: class_means must be (K, d)")
        if self.shift.shape != (self.d,):
            raise ValueError("DomainSpec: shift must be (d,)")
        if self.noise_scale <= 0:
            raise ValueError("DomainSpec: noise_scale must be > 0")
        if len(np.unique(self.class_means, axis=0)) != self.K:
            raise ValueError("DomainSpec: class means must be pairwise distinct")

    def shifted(self, shift: np.ndarray) -> "DomainSpec":
        """Same geometry under a different covariate shift."""
        return DomainSpec(self.K, self.d, self.class_means,
                          self.noise_scale, np.asarray(shift, dtype=float))


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    spec: DomainSpec

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.features) == 0:
            raise ValueError("LabeledDataset: must be nonempty")
        if len(self.features) != len(self.labels):
            raise ValueError("LabeledDataset: features/labels length mismatch")
        if self.labels.min() < 0 or self.labels.max() >= self.spec.K:
            raise ValueError("LabeledDataset: label out of range")

    def __len__(self) -> int:
        return len(self.labels)


def gen_blobs(spec: DomainSpec, n: int, rng: RngStream) -> LabeledDataset:
    """Draw n samples: uniform label, then mean + shift + Gaussian noise."""
    if n < spec.K:
        raise ValueError("gen_blobs: need n >= K")
    y = rng.gen.integers(0, spec.K, n)
    x = (spec.class_means[y] + spec.shift
         + spec.noise_scale * rng.gen.standard_normal((n, spec.d)))
    return LabeledDataset(x, y, spec)


@dataclass
class TrainConfig:
    lr: float = 0.1
    max_iters: int = 2000
    target_acc: float = 0.99


def train_source(ds: LabeledDataset, cfg: TrainConfig = TrainConfig()) -> ModelParams:
    """Fit a linear-softmax classifier by full-batch gradient descent.

    Starts from zero parameters and stops at max_iters or once training
    accuracy reaches the target.  Deterministic given (ds, cfg).
    """
    k, d = ds.spec.K, ds.spec.d
    params = ModelParams.zeros(k, d)
    targets = one_hot(ds.labels, k)
    x, n = ds.features, len(ds)
    for _ in range(cfg.max_iters):
        q = softmax(params.logits(x))
        if (q.argmax(axis=1) == ds.labels).mean() >= cfg.target_acc:
            break
        g = (q - targets) / n
        params.W -= cfg.lr * (g.T @ x)
        params.b -= cfg.lr * g.sum(axis=0)
    return params


def save_dataset_csv(ds: LabeledDataset, path: str) -> None:
    """One row per sample: d feature columns followed by the label column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.spec.d)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path: str, spec: DomainSpec) -> LabeledDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        feats, labels = [], []
        for row in reader:
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    return LabeledDataset(np.array(feats), np.array(labels), spec)


@dataclass
class BenchmarkDomain:
    """The standard attack benchmark: a source domain, its shifted twin, and data."""

    source_spec: DomainSpec
    target_spec: DomainSpec
    source_train: LabeledDataset = field(repr=False)
    attack_pool: LabeledDataset = field(repr=False)
    probe: LabeledDataset = field(repr=False)
    source_model: ModelParams = field(repr=False)


def make_benchmark(seed: int, k: int = 10, d: int = 16, sep: float = 2.5,
                   noise_scale: float = 0.6, shift_mag: float = 1.2,
                   center_offset: float = 10.0, n_source: int = 4000,
                   n_attack: int = 8000, n_probe: int = 1000) -> BenchmarkDomain:
    """Build the synthetic K-class benchmark used by the attack experiments.

    Class means sit on a sphere of radius ``sep`` around a common center of
    norm ``center_offset``; the target domain adds a random shift of length
    ``shift_mag``.  The offset inflates feature norms, which speeds up the
    victim's boundary dynamics at a fixed learning rate without changing the
    class geometry.
    """
    rng = RngStream(seed, stream_id=100)
    means = rng.gen.standard_normal((k, d))
    means = sep * means / np.linalg.norm(means, axis=1, keepdims=True)
    means = means + center_offset / np.sqrt(d)
    v = rng.gen.standard_normal(d)
    shift = shift_mag * v / np.linalg.norm(v)

    src_spec = DomainSpec(k, d, means, noise_scale, np.zeros(d))
    tgt_spec = src_spec.shifted(shift)

    source_train = gen_blobs(src_spec, n_source, rng)
    attack_pool = gen_blobs(tgt_spec, n_attack, rng)
    probe = gen_blobs(tgt_spec, n_probe, rng)
    source_model = train_source(source_train)
    return BenchmarkDomain(src_spec, tgt_spec, source_train,
                           attack_pool, probe, source_model)

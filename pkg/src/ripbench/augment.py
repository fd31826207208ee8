"""AWGN augmentation and the discrete strength-level schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream

#: Noise standard deviation for each augmentation level 1..5.
LEVEL_SIGMA = {1: 0.05, 2: 0.10, 3: 0.15, 4: 0.20, 5: 0.30}


@dataclass
class AugConfig:
    """Additive white Gaussian noise augmentation settings."""

    sigma: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("AugConfig: sigma must be >= 0")

    @classmethod
    def from_level(cls, level: int, enabled: bool = True) -> "AugConfig":
        return cls(sigma=level_to_sigma(level), enabled=enabled)

    @classmethod
    def off(cls) -> "AugConfig":
        return cls(sigma=0.0, enabled=False)


def awgn(x: np.ndarray, cfg: AugConfig, rng: RngStream) -> np.ndarray:
    """Return x + delta with delta ~ N(0, sigma^2) i.i.d. per coordinate.

    Identity when augmentation is disabled or sigma is zero.
    """
    x = np.asarray(x, dtype=float)
    if not cfg.enabled or cfg.sigma == 0.0:
        return x
    return x + cfg.sigma * rng.gen.standard_normal(x.shape)


def level_to_sigma(level: int) -> float:
    """Map an augmentation level in [1, 5] to its noise standard deviation."""
    if level not in LEVEL_SIGMA:
        raise ValueError(f"augmentation level must be in [1, 5], got {level!r}")
    return LEVEL_SIGMA[level]

"""Label-preserving chip augmentations: flips, right-angle rotations, brightness jitter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    rotate: float = 1.0
    jitter: float = 0.8
    jitter_strength: float = 0.4
    # max shift in pixels, applied with wrap-around; 0 disables
    shift: int = 0

    def __post_init__(self):
        for name in ("hflip", "vflip", "rotate", "jitter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} probability must be in [0, 1], got {p}")
        if not 0.0 <= self.jitter_strength < 1.0:
            raise ValueError("jitter_strength must be in [0, 1)")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=0.0, vflip=0.0, rotate=0.0, jitter=0.0, shift=0)


def rotate90(chip: np.ndarray, turns: int = 1) -> np.ndarray:
    """Rotate clockwise by ``turns`` quarter turns."""
    return np.rot90(chip, k=-turns, axes=(0, 1))


def jitter(chip: np.ndarray, factors) -> np.ndarray:
    """Scale each channel by its factor, clamp to [0, 255] and round back to uint8."""
    factors = np.asarray(factors, dtype=np.float64)
    if np.all(factors == 1.0):
        return chip.copy()
    return np.clip(np.rint(chip.astype(np.float64) * factors), 0, 255).astype(np.uint8)


def augment(chip: np.ndarray, config: AugmentConfig, seed) -> np.ndarray:
    """Apply each enabled augmentation with its configured probability.

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`
    (an int or a sequence of ints); equal seeds give equal outputs.
    """
    rng = np.random.default_rng(seed)
    draws = rng.random(4)
    out = chip
    if draws[0] < config.hflip:
        out = out[:, ::-1]
    if draws[1] < config.vflip:
        out = out[::-1]
    if draws[2] < config.rotate:
        out = rotate90(out, int(rng.integers(0, 4)))
    if config.shift:
        dy, dx = rng.integers(-config.shift, config.shift + 1, size=2)
        out = np.roll(out, (int(dy), int(dx)), axis=(0, 1))
    if draws[3] < config.jitter:
        s = config.jitter_strength
        out = jitter(out, rng.uniform(1 - s, 1 + s, size=out.shape[2]))
    return np.ascontiguousarray(out)


def augment_batch(chips: np.ndarray, config: AugmentConfig, seed: int, epoch: int, indices) -> np.ndarray:
    """Augment a batch; every chip's randomness depends only on (seed, epoch, instance index)."""
    return np.stack([augment(c, config, (seed, epoch, int(i))) for c, i in zip(chips, indices)])

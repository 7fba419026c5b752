"""Seeded synthetic chip corpus with power-law class imbalance."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

SHAPES = ("disc", "square", "cross", "ring", "stripes", "triangle", "corner", "saltire")


@dataclass
class SynthConfig:
    num_classes: int = 8
    total: int = 5000
    # class c gets a share proportional to (c + 1) ** -imbalance
    imbalance: float = 0.0
    chip_side: int = 32
    noise: float = 12.0
    color_noise: float = 40.0
    background: tuple[float, float] = (40.0, 200.0)
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")
        self.background = tuple(float(b) for b in self.background)
        if self.chip_side < 8:
            raise ValueError("chip_side must be >= 8")

    @staticmethod
    def exponent_for_ratio(num_classes: int, ratio: float) -> float:
        """Imbalance exponent giving largest:smallest class ratio ``ratio``."""
        return 0.0 if num_classes < 2 else math.log(ratio) / math.log(num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


@dataclass
class ChipDataset:
    chips: np.ndarray          # (N, s, s, 3) uint8
    labels: np.ndarray         # (N,) int64
    split: np.ndarray          # (N,) "train" / "test"
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.labels), dtype=np.uint64)

    def subset(self, name: str) -> "ChipDataset":
        m = self.split == name
        return ChipDataset(self.chips[m], self.labels[m], self.split[m], self.class_names)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.chips, self.labels, self.split.astype("U5")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def class_sizes(num_classes: int, total: int, imbalance: float) -> np.ndarray:
    """Power-law class sizes summing exactly to ``total``."""
    w = (np.arange(num_classes) + 1.0) ** -imbalance
    return _largest_remainder(w, total)


def _mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    box = np.maximum(au, av) < 1.0
    if kind == "disc":
        return u * u + v * v < 1.0
    if kind == "square":
        return np.maximum(au, av) < 0.8
    if kind == "cross":
        return ((au < 0.3) & (av < 1.0)) | ((av < 0.3) & (au < 1.0))
    if kind == "ring":
        r = np.sqrt(u * u + v * v)
        return (r > 0.55) & (r < 1.0)
    if kind == "stripes":
        return box & (np.floor((v + 1.0) * 2.5) % 2 == 0)
    if kind == "triangle":
        return (v > -0.8) & (v < 0.8) & (au < (0.8 - v) * 0.6)
    if kind == "corner":
        return box & ((v > 0.4) | (u < -0.4))
    if kind == "saltire":
        return (np.maximum(au, av) < 1.0) & ((np.abs(u + v) < 0.35) | (np.abs(u - v) < 0.35))
    raise ValueError(kind)


def _class_archetype(c: int, seed: int) -> tuple[str, float, np.ndarray]:
    """Shape, aspect ratio and base colour for class ``c``."""
    rng = np.random.default_rng((seed, 7919, c))
    kind = SHAPES[c % len(SHAPES)]
    aspect = 1.0 if c < len(SHAPES) else float(rng.uniform(0.5, 0.8))
    hue = (c * 0.618034 + 0.1) % 1.0
    base = np.array([_hue_channel(hue + o) for o in (0.0, 1 / 3, 2 / 3)]) * 160 + 60
    return kind, aspect, base


def _hue_channel(h: float) -> float:
    return 0.5 + 0.5 * math.cos(2 * math.pi * h)


def render_chip(kind: str, aspect: float, color: np.ndarray, side: int, rng: np.random.Generator,
                noise: float, background=(40.0, 200.0)) -> np.ndarray:
    scale = rng.uniform(0.28, 0.45) * side
    cx, cy = (side - 1) / 2 + rng.uniform(-0.12, 0.12, size=2) * side
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / scale
    v = (-s * dx + c * dy) / (scale * aspect)
    mask = _mask(kind, u, v)
    bg = rng.uniform(*background) + rng.normal(0, 8, size=3)
    img = np.empty((side, side, 3))
    img[:] = bg
    img[mask] = color
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_dataset(config: SynthConfig) -> ChipDataset:
    """Render the corpus.  Identical configs give byte-identical datasets."""
    sizes = class_sizes(config.num_classes, config.total, config.imbalance)
    if sizes.min() < 2:
        raise ValueError(f"class {int(np.argmin(sizes))} would have {sizes.min()} instances; need >= 2")
    test_total = int(round(config.total * config.test_fraction))
    tests = _largest_remainder(sizes.astype(np.float64), test_total) if test_total else np.zeros_like(sizes)
    if config.test_fraction > 0:
        tests = np.clip(tests, 1, sizes - 1)

    chips, labels, split = [], [], []
    for c in range(config.num_classes):
        kind, aspect, base = _class_archetype(c, config.seed)
        rng = np.random.default_rng((config.seed, c))
        for k in range(sizes[c]):
            color = np.clip(base + rng.normal(0, config.color_noise, size=3), 0, 255)
            chips.append(render_chip(kind, aspect, color, config.chip_side, rng, config.noise, config.background))
            labels.append(c)
            split.append("test" if k < tests[c] else "train")
    names = [f"{SHAPES[c % len(SHAPES)]}-{c}" for c in range(config.num_classes)]
    return ChipDataset(np.stack(chips), np.array(labels, dtype=np.int64), np.array(split), names)

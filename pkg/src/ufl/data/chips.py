"""Square chip extraction from axis-aligned bounding-box annotations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Annotation:
    """Half-open pixel box ``[x_min, x_max) x [y_min, y_max)`` on one image."""

    image: str
    bbox: tuple[int, int, int, int]
    class_id: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox} on {self.image}")


@dataclass(frozen=True)
class ChipWindow:
    """Square window ``[x0, x0 + side) x [y0, y0 + side)``."""

    x0: int
    y0: int
    side: int

    def inside(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x0 + self.side <= width and self.y0 + self.side <= height


@dataclass
class Chip:
    pixels: np.ndarray
    annotation: Annotation
    window: ChipWindow

    @property
    def class_id(self) -> int:
        return self.annotation.class_id


@dataclass
class Discard:
    index: int
    annotation: Annotation | None
    reason: str


@dataclass
class ExtractResult:
    chips: list[Chip] = field(default_factory=list)
    kept: list[int] = field(default_factory=list)
    discarded: list[Discard] = field(default_factory=list)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def chip_window(bbox) -> ChipWindow:
    """Square window of side max(w, h) centred on the box centre."""
    x0, y0, x1, y1 = bbox
    side = max(x1 - x0, y1 - y0)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return ChipWindow(_round_half_up(cx - side / 2), _round_half_up(cy - side / 2), side)


def load_rgb(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def extract_chips(annotations: Iterable[Annotation],
                  images: Mapping[str, np.ndarray] | Callable[[str], np.ndarray] | None = None) -> ExtractResult:
    """Crop one square chip per annotation.

    ``images`` maps an image id to an (H, W, 3) array, or is a loader
    callable; by default images are read from disk.  Chips whose window
    leaves the image are discarded, as are annotations whose image cannot be
    read.  Every input index ends up in exactly one of ``kept`` or
    ``discarded``.
    """
    if images is None:
        loader = load_rgb
    elif callable(images) and not isinstance(images, Mapping):
        loader = images
    else:
        loader = images.__getitem__
    cache: dict[str, np.ndarray | Exception] = {}
    out = ExtractResult()
    for idx, ann in enumerate(annotations):
        if ann.image not in cache:
            try:
                cache[ann.image] = np.asarray(loader(ann.image))
            except Exception as exc:  # noqa: BLE001 - any decode failure is a per-item error
                cache[ann.image] = exc
        img = cache[ann.image]
        if isinstance(img, Exception):
            out.discarded.append(Discard(idx, ann, f"unreadable image: {img}"))
            continue
        h, w = img.shape[:2]
        win = chip_window(ann.bbox)
        if not win.inside(w, h):
            out.discarded.append(Discard(idx, ann, "chip crosses image boundary"))
            continue
        pixels = img[win.y0:win.y0 + win.side, win.x0:win.x0 + win.side].copy()
        out.chips.append(Chip(pixels, ann, win))
        out.kept.append(idx)
    log.info("extracted %d chips, discarded %d", len(out.chips), len(out.discarded))
    return out


def resize_chip(pixels: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resample of a square uint8 chip to ``side`` x ``side``."""
    if pixels.shape[0] == side and pixels.shape[1] == side:
        return pixels.copy()
    im = Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8))
    return np.asarray(im.resize((side, side), Image.BILINEAR))

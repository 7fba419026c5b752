"""Binary bank files, annotation manifests, chip indexes and population tables."""

from __future__ import annotations

import csv
import json
import os
import struct
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from ..models import FormatError
from ..train import MemoryBank
from .chips import Annotation, Chip
from .synth import ChipDataset

BANK_MAGIC = b"UFLB"
BANK_VERSION = 1
_FLAG_LABELS = 1
_HEADER = struct.Struct("<4sHHQI")


def bank_to_bytes(bank: MemoryBank) -> bytes:
    flags = _FLAG_LABELS if bank.labels is not None else 0
    parts = [
        _HEADER.pack(BANK_MAGIC, BANK_VERSION, flags, bank.n, bank.d),
        np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes(),
        np.ascontiguousarray(bank.ids, dtype="<u8").tobytes(),
    ]
    if bank.labels is not None:
        parts.append(np.ascontiguousarray(bank.labels, dtype="<i4").tobytes())
    return b"".join(parts)


def bank_from_bytes(raw: bytes, tau: float = 0.07) -> MemoryBank:
    if len(raw) < 4 or raw[:4] != BANK_MAGIC:
        raise FormatError(f"bad bank magic {raw[:4]!r} at byte offset 0")
    if len(raw) < _HEADER.size:
        raise FormatError(f"bank file truncated in header at byte offset {len(raw)}")
    _, version, flags, n, d = _HEADER.unpack_from(raw, 0)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version} at byte offset 4")
    if flags & ~_FLAG_LABELS:
        raise FormatError(f"unknown bank flags {flags:#x} at byte offset 6")
    off = _HEADER.size
    sections = [("vectors", "<f4", n * d), ("ids", "<u8", n)]
    if flags & _FLAG_LABELS:
        sections.append(("labels", "<i4", n))
    arrays = {}
    for name, dt, count in sections:
        nbytes = np.dtype(dt).itemsize * count
        if off + nbytes > len(raw):
            raise FormatError(f"bank file truncated in {name} at byte offset {len(raw)} (need {off + nbytes})")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after bank data at byte offset {off}")
    return MemoryBank(arrays["vectors"].reshape(n, d), arrays["ids"], arrays.get("labels"), tau=tau)


def save_bank(path, bank: MemoryBank) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path, tau: float = 0.07) -> MemoryBank:
    return bank_from_bytes(Path(path).read_bytes(), tau)


# -- annotations --------------------------------------------------------------


def read_manifest(path) -> list[Annotation]:
    """JSON lines ``{"image": path, "bbox": [x0, y0, x1, y1], "class_id": int}``.

    Relative image paths resolve against the manifest's directory.
    """
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image = rec["image"]
                if not os.path.isabs(image):
                    image = str(base / image)
                out.append(Annotation(image, tuple(int(v) for v in rec["bbox"]), int(rec["class_id"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    return out


def write_manifest(path, annotations) -> None:
    with open(path, "w") as fh:
        for a in annotations:
            fh.write(json.dumps({"image": a.image, "bbox": list(a.bbox), "class_id": a.class_id}) + "\n")


def write_chips(out_dir, chips: list[Chip], split: str = "train") -> Path:
    """Store chips as PNG files plus ``index.csv``; returns the index path."""
    out = Path(out_dir)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    index = out / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chip_path", "class_id", "source_image", "bbox", "split"])
        for k, chip in enumerate(chips):
            rel = f"chips/{k:07d}.png"
            Image.fromarray(chip.pixels).save(out / rel)
            w.writerow([rel, chip.class_id, chip.annotation.image, " ".join(map(str, chip.annotation.bbox)), split])
    return index


# -- datasets -----------------------------------------------------------------


def save_dataset(out_dir, ds: ChipDataset) -> Path:
    """Write a dataset directory: chips/*.png, index.csv, classes.json."""
    out = Path(out_dir)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chip_path", "class_id", "source_image", "bbox", "split"])
        s = ds.chips.shape[1]
        for k in range(len(ds)):
            rel = f"chips/{k:07d}.png"
            Image.fromarray(ds.chips[k]).save(out / rel, optimize=False)
            w.writerow([rel, int(ds.labels[k]), "synthetic", f"0 0 {s} {s}", ds.split[k]])
    with open(out / "classes.json", "w") as fh:
        json.dump(ds.class_names, fh, indent=2)
    return out / "index.csv"


def load_dataset(path, side: int | None = None) -> ChipDataset:
    """Read a dataset directory (or its index.csv); chips are resized to ``side`` if given."""
    from .chips import resize_chip

    p = Path(path)
    index = p / "index.csv" if p.is_dir() else p
    root = index.parent
    if not index.exists():
        raise FileNotFoundError(f"no chip index at {index}")
    chips, labels, split = [], [], []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"chip_path", "class_id"} - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{index}: missing columns {sorted(missing)}")
        for row in reader:
            with Image.open(root / row["chip_path"]) as im:
                px = np.asarray(im.convert("RGB"))
            if px.shape[0] != px.shape[1]:
                raise FormatError(f"{row['chip_path']}: chip is not square ({px.shape[1]}x{px.shape[0]})")
            if side is not None:
                px = resize_chip(px, side)
            chips.append(px)
            labels.append(int(row["class_id"]))
            split.append(row.get("split") or "train")
    sides = {c.shape for c in chips}
    if len(sides) > 1:
        raise FormatError(f"{index}: chips have differing sizes {sorted(sides)}; pass a target side")
    names_path = root / "classes.json"
    num = (max(labels) + 1) if labels else 0
    names = json.loads(names_path.read_text()) if names_path.exists() else [str(c) for c in range(num)]
    arr = np.stack(chips) if chips else np.zeros((0, side or 0, side or 0, 3), np.uint8)
    return ChipDataset(arr, np.array(labels, dtype=np.int64), np.array(split), names)


# -- population tables --------------------------------------------------------


def read_populations(path=None) -> list[tuple[str, int, int]]:
    """(class, train_count, test_count) rows; defaults to the bundled xView table."""
    if path is None:
        text = resources.files("ufl.data").joinpath("xview_populations.csv").read_text()
        rows = list(csv.reader(text.splitlines()))
    else:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["class", "train_count", "test_count"]:
        raise FormatError("population table must start with header class,train_count,test_count")
    out = []
    for lineno, r in enumerate(rows[1:], 2):
        if not r:
            continue
        try:
            out.append((r[0], int(r[1]), int(r[2])))
        except (IndexError, ValueError) as exc:
            raise FormatError(f"population table line {lineno}: {exc}") from exc
    return out


def write_populations(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "train_count", "test_count"])
        w.writerows(rows)

"""Encoder f_theta, the mirrored decoder, and the parametric softmax head."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def _default_layers() -> list[dict]:
    return [
        {"kind": "conv", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
        {"kind": "conv", "out": 32, "kernel": 3, "stride": 2, "padding": 1},
        {"kind": "conv", "out": 64, "kernel": 3, "stride": 2, "padding": 1},
    ]


@dataclass
class EncoderConfig:
    """Architecture of the embedding network.

    ``layers`` lists the convolutional trunk; a final linear layer maps the
    flattened trunk output to ``embed_dim`` and the result is L2-normalised.
    """

    input_shape: tuple[int, int, int] = (32, 32, 3)
    layers: list[dict] = field(default_factory=_default_layers)
    embed_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        for layer in self.layers:
            if layer.get("kind") != "conv":
                raise ValueError(f"unsupported trunk layer {layer!r}")
        self.trunk_shapes()

    def trunk_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) after the input and after every conv layer."""
        h, w, c = self.input_shape
        shapes = [(c, h, w)]
        for layer in self.layers:
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise ValueError(f"layer {layer!r} reduces the feature map to nothing")
            c = layer["out"]
            shapes.append((c, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def chips_to_input(chips: np.ndarray, dtype=None) -> np.ndarray:
    """uint8 (N, H, W, C) chips -> centred float (N, C, H, W) array in [-0.5, 0.5]."""
    x = np.asarray(chips)
    if x.ndim == 3:
        x = x[None]
    return (x.transpose(0, 3, 1, 2).astype(dtype or ad.get_dtype()) / 255.0) - 0.5


class Encoder:
    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        rng = np.random.default_rng(self.config.seed)
        self.convs: list[tuple[Tensor, Tensor, dict]] = []
        shapes = self.config.trunk_shapes()
        for k, layer in enumerate(self.config.layers):
            cin = shapes[k][0]
            ks = layer["kernel"]
            W = _glorot(rng, (layer["out"], cin, ks, ks), cin * ks * ks, layer["out"] * ks * ks)
            self.convs.append((
                Tensor(W, requires_grad=True, name=f"conv{k}.weight"),
                Tensor(np.zeros(layer["out"]), requires_grad=True, name=f"conv{k}.bias"),
                layer,
            ))
        flat = int(np.prod(shapes[-1]))
        d = self.config.embed_dim
        self.fc_w = Tensor(_glorot(rng, (d, flat), flat, d), requires_grad=True, name="fc.weight")
        self.fc_b = Tensor(np.zeros(d), requires_grad=True, name="fc.bias")

    def parameters(self) -> list[Tensor]:
        out = []
        for W, b, _ in self.convs:
            out += [W, b]
        return out + [self.fc_w, self.fc_b]

    def forward(self, x: Tensor) -> Tensor:
        """Embed an (N, C, H, W) tensor; returns unit rows of shape (N, d)."""
        c, h, w = self.config.trunk_shapes()[0]
        if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ShapeError(f"encoder expects (N, {c}, {h}, {w}), got {x.shape}")
        for W, b, layer in self.convs:
            x = ad.relu(ad.conv2d(W, x, layer.get("stride", 1), layer.get("padding", 0), bias=b))
        x = ad.reshape(x, (x.shape[0], -1))
        return ad.l2_normalize(ad.linear(self.fc_w, self.fc_b, x), axis=1)

    def embed(self, chips: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Embed uint8 (N, H, W, C) chips without recording gradients."""
        chips = np.asarray(chips)
        if chips.ndim == 3:
            chips = chips[None]
        if chips.shape[1:] != self.config.input_shape:
            raise ShapeError(f"chips of shape {chips.shape[1:]} do not match encoder input {self.config.input_shape}")
        out = []
        for s in range(0, len(chips), batch_size):
            out.append(self.forward(Tensor(chips_to_input(chips[s:s + batch_size]))).data)
        if not out:
            return np.zeros((0, self.config.embed_dim), dtype=ad.get_dtype())
        return np.concatenate(out)


class Decoder:
    """Mirror of an encoder trunk using nearest-neighbour upsampling.

    Requires every encoder conv layer to halve the spatial size exactly.
    """

    def __init__(self, config: EncoderConfig, seed: int | None = None):
        self.config = config
        shapes = config.trunk_shapes()
        for (c0, h0, w0), (c1, h1, w1) in zip(shapes, shapes[1:]):
            if (h0, w0) != (2 * h1, 2 * w1):
                raise ValueError("decoder needs every encoder layer to halve the spatial size")
        rng = np.random.default_rng(config.seed + 1 if seed is None else seed)
        c, h, w = shapes[-1]
        d = config.embed_dim
        self.top_shape = (c, h, w)
        self.fc_w = Tensor(_glorot(rng, (c * h * w, d), d, c * h * w), requires_grad=True, name="dec.fc.weight")
        self.fc_b = Tensor(np.zeros(c * h * w), requires_grad=True, name="dec.fc.bias")
        self.convs: list[tuple[Tensor, Tensor]] = []
        for k in range(len(shapes) - 1, 0, -1):
            cin, cout = shapes[k][0], shapes[k - 1][0]
            W = _glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9)
            self.convs.append((
                Tensor(W, requires_grad=True, name=f"dec.conv{k}.weight"),
                Tensor(np.zeros(cout), requires_grad=True, name=f"dec.conv{k}.bias"),
            ))

    def parameters(self) -> list[Tensor]:
        out = [self.fc_w, self.fc_b]
        for W, b in self.convs:
            out += [W, b]
        return out

    def forward(self, v: Tensor) -> Tensor:
        x = ad.relu(ad.linear(self.fc_w, self.fc_b, v))
        x = ad.reshape(x, (v.shape[0],) + self.top_shape)
        for k, (W, b) in enumerate(self.convs):
            x = ad.conv2d(W, ad.upsample2x(x), 1, 1, bias=b)
            if k < len(self.convs) - 1:
                x = ad.relu(x)
        return x


class SupervisedHead:
    """Class weight vectors w_j stored row-wise as a (C, d) matrix."""

    def __init__(self, num_classes: int, embed_dim: int, seed: int = 0):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        rng = np.random.default_rng(seed)
        self.W = Tensor(_glorot(rng, (num_classes, embed_dim), embed_dim, num_classes),
                        requires_grad=True, name="head.weight")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W]

    def logits(self, v: Tensor) -> Tensor:
        return ad.linear(self.W, None, v)


def parametric_softmax(head: SupervisedHead | np.ndarray, v) -> np.ndarray:
    """P(i|v) = exp(w_i.v) / sum_j exp(w_j.v) for a vector or a batch of rows."""
    W = head.W.data if isinstance(head, SupervisedHead) else np.asarray(head)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if v.shape[-1] != W.shape[1]:
        raise ShapeError(f"embedding length {v.shape[-1]} does not match head dimension {W.shape[1]}")
    z = v @ np.asarray(W, dtype=np.float64).T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def autoencoder_loss(encoder: Encoder, decoder: Decoder, batch: Tensor) -> Tensor:
    """Mean squared reconstruction error of an (N, C, H, W) batch."""
    recon = decoder.forward(encoder.forward(batch))
    if recon.shape != batch.shape:
        raise ShapeError(f"reconstruction {recon.shape} does not match input {batch.shape}")
    return ad.mse(recon, batch)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return ad.mean(ad.add(ad.logsumexp(logits, axis=1), ad.scalar_mul(ad.pick(logits, labels), -1.0)))


def supervised_loss(encoder: Encoder, head: SupervisedHead, batch: Tensor, labels) -> Tensor:
    """Cross-entropy of the parametric softmax head on top of the embedding."""
    return cross_entropy(head.logits(encoder.forward(batch)), labels)


def class_balanced_sampler(labels: Sequence[int], batch_size: int, seed: int = 0,
                           num_classes: int | None = None) -> Iterator[np.ndarray]:
    """Endless stream of index batches: pick a class uniformly, then an instance uniformly within it."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    empty = [c for c, m in enumerate(members) if m.size == 0]
    if empty:
        raise ValueError(f"class_balanced_sampler: classes {empty} have no instances")
    rng = np.random.default_rng(seed)
    sizes = np.array([m.size for m in members])
    while True:
        cls = rng.integers(0, num_classes, size=batch_size)
        pos = (rng.random(batch_size) * sizes[cls]).astype(np.int64)
        yield np.array([members[c][p] for c, p in zip(cls, pos)], dtype=np.int64)


# -- checkpoint file ----------------------------------------------------------

CHECKPOINT_MAGIC = b"UFLM"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A binary artifact is malformed; the message carries the byte offset."""


def save_checkpoint(path, encoder: Encoder, extras: dict | None = None,
                    extra_params: Sequence[Tensor] = ()) -> None:
    """Write encoder (and optional decoder/head) parameters.

    ``extras`` is merged into the JSON header, e.g. ``{"mode": "supervised",
    "num_classes": 8}``; ``extra_params`` follow the encoder parameters.
    """
    header = {"encoder": encoder.config.to_dict(), **(extras or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for p in list(encoder.parameters()) + list(extra_params):
        arr = np.ascontiguousarray(p.data, dtype="<f4").reshape(-1)
        buf.write(struct.pack("<Q", arr.size))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    """Return (header, flat float32 parameter arrays) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r} at byte offset 0")
    if len(raw) < 10:
        raise FormatError(f"checkpoint truncated in header at byte offset {len(raw)}")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    off = 10
    if off + n > len(raw):
        raise FormatError(f"checkpoint truncated in config blob at byte offset {len(raw)}")
    header = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    arrays = []
    while off < len(raw):
        if off + 8 > len(raw):
            raise FormatError(f"checkpoint truncated in tensor length at byte offset {off}")
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if off + 4 * count > len(raw):
            raise FormatError(f"checkpoint truncated in tensor data at byte offset {off}")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=off).copy())
        off += 4 * count
    return header, arrays


def restore_params(params: Sequence[Tensor], arrays: Sequence[np.ndarray]) -> None:
    if len(arrays) < len(params):
        raise FormatError(f"checkpoint holds {len(arrays)} tensors, model needs {len(params)}")
    for p, a in zip(params, arrays):
        if a.size != p.size:
            raise FormatError(f"parameter {p.name}: checkpoint has {a.size} values, expected {p.size}")
        p.data = a.reshape(p.shape).astype(p.data.dtype)


def load_encoder(path) -> tuple[Encoder, dict, list[np.ndarray]]:
    """Rebuild an encoder from a checkpoint; also returns the header and unused tensors."""
    header, arrays = load_checkpoint(path)
    enc = Encoder(EncoderConfig.from_dict(header["encoder"]))
    params = enc.parameters()
    restore_params(params, arrays)
    return enc, header, arrays[len(params):]

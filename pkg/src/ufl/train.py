"""Non-parametric instance discrimination: memory bank, objectives, training loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data.augment import AugmentConfig, augment_batch
from .models import (
    Decoder,
    Encoder,
    SupervisedHead,
    autoencoder_loss,
    chips_to_input,
    class_balanced_sampler,
    supervised_loss,
)

log = logging.getLogger(__name__)

UNIT_TOL = 1e-5


class MemoryBank:
    """One unit-norm feature row per training instance, stored as float32."""

    def __init__(self, vectors, ids=None, labels=None, tau: float = 0.07, dtype=np.float32):
        vectors = np.array(vectors, dtype=dtype)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError(f"bank vectors must be a non-empty (n, d) matrix, got {vectors.shape}")
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        _check_unit(vectors.astype(np.float64), "bank")
        self.vectors = vectors
        n = vectors.shape[0]
        self.ids = np.arange(n, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int32)
        if len(self.ids) != n or (self.labels is not None and len(self.labels) != n):
            raise ValueError("ids/labels length must equal the number of bank rows")
        self.tau = float(tau)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def nbytes(self) -> int:
        return self.vectors.nbytes

    def with_labels(self, labels) -> "MemoryBank":
        return MemoryBank(self.vectors, self.ids, labels, self.tau, self.vectors.dtype)


def bank_bytes(n: int, d: int, bytes_per_value: int = 4) -> int:
    """Storage needed for an n x d bank of reals."""
    return n * d * bytes_per_value


def _check_unit(v: np.ndarray, what: str = "query") -> None:
    norms = np.linalg.norm(np.atleast_2d(v), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise ValueError(f"{what} row {int(bad[0])} has norm {norms[bad[0]]:.8f}, expected unit length")


def init_bank(n: int, d: int, seed: int = 0, tau: float = 0.07, labels=None) -> MemoryBank:
    """Rows drawn uniformly on the unit sphere (normalised Gaussians)."""
    if n < 1:
        raise ValueError(f"bank needs n >= 1 rows, got {n}")
    if d < 2:
        raise ValueError(f"bank needs d >= 2, got {d}")
    g = np.random.default_rng(seed).standard_normal((n, d))
    return MemoryBank(g / np.linalg.norm(g, axis=1, keepdims=True), labels=labels, tau=tau)


def nonparam_probs(bank: MemoryBank, v) -> np.ndarray:
    """Full instance distribution P(.|v) for a unit vector v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (bank.d,):
        raise ValueError(f"query of shape {v.shape} does not match bank dimension {bank.d}")
    _check_unit(v)
    z = bank.vectors.astype(np.float64) @ v / bank.tau
    e = np.exp(z - z.max())
    return e / e.sum()


def nonparam_prob(bank: MemoryBank, v, i: int) -> float:
    """P(i|v) = exp(v_i.v / tau) / sum_j exp(v_j.v / tau)."""
    if not 0 <= i < bank.n:
        raise IndexError(f"instance index {i} out of range [0, {bank.n})")
    return float(nonparam_probs(bank, v)[i])


def _bank_const(bank: MemoryBank, rows=None) -> Tensor:
    data = bank.vectors if rows is None else bank.vectors[rows]
    return Tensor(data, dtype=ad.get_dtype())


def ufl_loss_exact(bank: MemoryBank, indices, v: Tensor) -> Tensor:
    """-sum_b log P(i_b | v_b) with bank rows held constant."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= bank.n):
        raise IndexError(f"instance indices must lie in [0, {bank.n})")
    _check_unit(v.data, "embedding")
    logits = ad.scalar_mul(ad.linear(_bank_const(bank), None, v), 1.0 / bank.tau)
    return ad.sum(ad.add(ad.logsumexp(logits, axis=1), ad.scalar_mul(ad.pick(logits, indices), -1.0)))


# -- NCE ----------------------------------------------------------------------


@dataclass
class NceConfig:
    m: int = 64
    z_estimate: float | None = None
    z_batches: int = 2

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.z_estimate is not None and not self.z_estimate > 0:
            raise ValueError("z_estimate must be positive")


def exact_denominator(bank: MemoryBank, queries) -> np.ndarray:
    """sum_j exp(v_j.q / tau) for each query row."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return np.exp(q @ bank.vectors.astype(np.float64).T / bank.tau).sum(axis=1)


def estimate_z(bank: MemoryBank, sample_count: int, seed: int = 0, queries=None) -> float:
    """Monte Carlo estimate of the softmax normaliser, averaged over ``queries``.

    Each query gets its own ``sample_count`` bank rows drawn without
    replacement; ``sample_count >= n`` enumerates the bank exactly.  Queries
    default to random unit vectors, which is what freshly initialised
    embeddings look like relative to a random bank.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    if queries is None:
        g = rng.standard_normal((max(1, min(bank.n, 256)), bank.d))
        queries = g / np.linalg.norm(g, axis=1, keepdims=True)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    V = bank.vectors.astype(np.float64)
    if sample_count >= bank.n:
        return float(bank.n * np.exp(q @ V.T / bank.tau).mean())
    total = 0.0
    for row in q:
        idx = rng.choice(bank.n, size=sample_count, replace=False)
        total += np.exp(V[idx] @ row / bank.tau).mean()
    return float(bank.n * total / len(q))


def estimate_z_from_embeddings(embeddings, n: int, tau: float = 0.07) -> float:
    """Normaliser n * mean exp(f_a.f_b / tau) over distinct pairs of initial embeddings.

    Within the first epoch every bank row is overwritten by an embedding, so
    the similarity scale that matters during training is embedding against
    embedding, not embedding against the random placeholder rows.  Self
    pairs are excluded because exp(1 / tau) would swamp the mean.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    k = len(E)
    if k < 2:
        raise ValueError("need at least two embeddings to estimate the normaliser")
    _check_unit(E, "embedding")
    S = np.exp(E @ E.T / tau)
    return float(n * (S.sum() - np.trace(S)) / (k * (k - 1)))


def nce_loss(bank: MemoryBank, config: NceConfig, indices, v: Tensor, rng: np.random.Generator) -> Tensor:
    """Binary data-vs-noise objective with uniform noise over instances.

    With P~(i|v) = exp(v_i.v / tau) / Z and h = P~ / (P~ + m/n), returns
    sum_b [ -log h(i_b, v_b) - sum_{m noise j} log(1 - h(j, v_b)) ].
    """
    if config.z_estimate is None:
        raise RuntimeError("NCE normaliser z_estimate is not initialised; call estimate_z first")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= bank.n):
        raise IndexError(f"instance indices must lie in [0, {bank.n})")
    _check_unit(v.data, "embedding")
    b, m = len(indices), config.m
    noise = rng.integers(0, bank.n, size=(b, m))
    return nce_loss_from_rows(bank, config, indices, noise, v)


def nce_loss_from_rows(bank: MemoryBank, config: NceConfig, indices, noise, v: Tensor) -> Tensor:
    """NCE loss with explicit noise indices of shape (B, m)."""
    b, m = noise.shape
    rows = np.concatenate([np.asarray(indices, dtype=np.int64), noise.reshape(-1)])
    sims = ad.scalar_mul(ad.linear(_bank_const(bank, rows), None, v), 1.0 / bank.tau)
    cols = np.concatenate([np.arange(b)[:, None], b + np.arange(b * m).reshape(b, m)], axis=1)
    logits = ad.pick(sims, cols)                                     # (B, 1 + m), positive first
    c = m / bank.n
    dt = logits.data.dtype
    # -log h(pos) - sum log(1 - h(noise))
    #   = sum log(P~ + c) - log P~(pos) - B m log c,  with log P~ = logit - log Z
    p_model = ad.scalar_mul(ad.exp(logits), 1.0 / config.z_estimate)
    log_denom = ad.sum(ad.log(ad.add(p_model, Tensor(np.full(logits.shape, c), dtype=dt))))
    pos = ad.sum(ad.pick(logits, np.zeros(b, dtype=np.int64)))
    const = b * math.log(config.z_estimate) - b * m * math.log(c)
    return ad.add(ad.add(log_denom, ad.scalar_mul(pos, -1.0)), Tensor(const, dtype=dt))


def update_bank(bank: MemoryBank, i, new_v, momentum: float = 0.0) -> None:
    """Replace rows ``i`` with ``new_v`` (optionally mixed with the old rows), re-normalised."""
    new_v = np.atleast_2d(np.asarray(new_v, dtype=np.float64))
    idx = np.atleast_1d(np.asarray(i, dtype=np.int64))
    if len(idx) != len(new_v):
        raise ValueError("one new vector per index required")
    _check_unit(new_v, "new vector")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    mixed = momentum * bank.vectors[idx].astype(np.float64) + (1 - momentum) * new_v
    bank.vectors[idx] = mixed / np.linalg.norm(mixed, axis=1, keepdims=True)


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    tau: float = 0.07
    lr: float = 0.03
    # "constant" or "step": multiply by lr_decay every lr_step epochs
    schedule: str = "constant"
    lr_decay: float = 0.5
    lr_step: int = 2
    sgd_momentum: float = 0.0
    epochs: int = 30
    batch_size: int = 16
    mode: str = "exact"
    nce_m: int = 64
    z_batches: int = 2
    bank_momentum: float = 0.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.tau <= 0 or self.lr <= 0:
            raise ValueError("tau and lr must be positive")
        if self.mode not in ("exact", "nce"):
            raise ValueError(f"mode must be 'exact' or 'nce', got {self.mode!r}")
        if self.schedule not in ("constant", "step"):
            raise ValueError(f"schedule must be 'constant' or 'step', got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def fine_tune(cls, **kw) -> "TrainConfig":
        kw.setdefault("lr", 0.001)
        return cls(schedule="step", lr_decay=0.5, lr_step=2, **kw)

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "step":
            return self.lr * self.lr_decay ** (epoch // self.lr_step)
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossRecord:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainResult:
    encoder: Encoder
    bank: MemoryBank | None
    losses: list[LossRecord]
    extra: dict = field(default_factory=dict)


def write_loss_log(path, losses: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for r in losses:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.lr)])


class _Sgd:
    """Plain SGD, or heavy-ball SGD whose velocity is passed to sgd_step as the step direction."""

    def __init__(self, params: list[Tensor], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params] if momentum else None

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.velocity is not None:
            for vel, g in zip(self.velocity, grads):
                vel *= self.momentum
                vel += g
            grads = self.velocity
        ad.sgd_step(self.params, grads, lr)
        for p in self.params:
            p.grad = None


def _finite(value: float, epoch: int) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss at epoch {epoch}")
    return value


LossFn = Callable[[int, np.ndarray], "tuple[Tensor, object]"]


def _fit(config: TrainConfig, params: list[Tensor], batches: Callable[[int], list[np.ndarray]],
         loss_fn: LossFn, after_step: Callable[[np.ndarray, object], None] | None = None,
         callback: Callable[[LossRecord], None] | None = None) -> list[LossRecord]:
    """Shared SGD driver.

    Epoch 0 is a measurement pass over the untouched model (no parameter or
    bank updates); epochs 1..E train.  Every record holds the
    instance-weighted mean batch loss.
    """
    opt = _Sgd(params, config.sgd_momentum)
    records: list[LossRecord] = []
    started = time.time()
    for epoch in range(config.epochs + 1):
        lr = config.lr_at(epoch - 1) if epoch else 0.0
        total, count = 0.0, 0
        for idx in batches(epoch):
            if epoch == 0:
                loss, _ = loss_fn(epoch, idx)
            else:
                with Tape():
                    loss, aux = loss_fn(epoch, idx)
                    ad.backward(loss)
            total += _finite(loss.item(), epoch) * len(idx)
            count += len(idx)
            if epoch:
                opt.step(lr)
                if after_step is not None:
                    after_step(idx, aux)
        records.append(LossRecord(epoch, _finite(total / count, epoch), lr))
        log.info("epoch %d mean_loss %.5f lr %g (%.1fs)", epoch, records[-1].mean_loss, lr, time.time() - started)
        if callback is not None:
            callback(records[-1])
    return records


def _augmented(chips: np.ndarray, config: TrainConfig, epoch: int, idx: np.ndarray) -> Tensor:
    return Tensor(chips_to_input(augment_batch(chips[idx], config.augment, config.seed, epoch, idx)))


def _shuffled(n: int, batch_size: int, seed: int) -> Callable[[int], list[np.ndarray]]:
    def batches(epoch: int) -> list[np.ndarray]:
        order = np.random.default_rng((seed, epoch)).permutation(n)
        return [order[s:s + batch_size] for s in range(0, n, batch_size)]
    return batches


def train(chips: np.ndarray, encoder: Encoder, config: TrainConfig | None = None, labels=None,
          callback: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Instance-discrimination training of ``encoder`` on uint8 (N, H, W, C) chips.

    Each epoch shuffles the instances; every batch is augmented, embedded,
    scored against the memory bank (exact softmax or NCE), back-propagated,
    stepped with SGD, and finally written into the bank.  ``labels`` are
    never used for training; they are only attached to the returned bank
    for later evaluation.
    """
    config = config or TrainConfig()
    n = len(chips)
    if n == 0:
        raise ValueError("training set is empty")
    bank = init_bank(n, encoder.config.embed_dim, seed=config.seed + 1, tau=config.tau, labels=labels)
    batches = _shuffled(n, config.batch_size, config.seed)
    nce = None
    if config.mode == "nce":
        nce = NceConfig(m=config.nce_m, z_batches=config.z_batches)
        first = batches(0)[: max(1, config.z_batches)]
        initial = np.concatenate([encoder.embed(augment_batch(chips[b], config.augment, config.seed, 0, b))
                                  for b in first])
        nce.z_estimate = estimate_z_from_embeddings(initial, n, config.tau)
        log.info("NCE normaliser estimated as %.6g", nce.z_estimate)
    noise_rng = np.random.default_rng((config.seed, 2))

    def loss_fn(epoch, idx):
        v = encoder.forward(_augmented(chips, config, epoch, idx))
        total = ufl_loss_exact(bank, idx, v) if nce is None else nce_loss(bank, nce, idx, v, noise_rng)
        return ad.scalar_mul(total, 1.0 / len(idx)), v

    def after_step(idx, v):
        update_bank(bank, idx, v.data, momentum=config.bank_momentum)

    records = _fit(config, encoder.parameters(), batches, loss_fn, after_step, callback)
    extra = {"z_estimate": nce.z_estimate} if nce is not None else {}
    return TrainResult(encoder, bank, records, extra)


def train_autoencoder(chips: np.ndarray, encoder: Encoder, config: TrainConfig | None = None,
                      decoder: Decoder | None = None, callback=None) -> TrainResult:
    """Reconstruction-loss baseline; the decoder is discarded for evaluation."""
    config = config or TrainConfig()
    decoder = decoder or Decoder(encoder.config)

    def loss_fn(epoch, idx):
        return autoencoder_loss(encoder, decoder, _augmented(chips, config, epoch, idx)), None

    records = _fit(config, encoder.parameters() + decoder.parameters(),
                   _shuffled(len(chips), config.batch_size, config.seed), loss_fn, callback=callback)
    return TrainResult(encoder, None, records, {"decoder": decoder})


def train_supervised(chips: np.ndarray, labels, encoder: Encoder, config: TrainConfig | None = None,
                     num_classes: int | None = None, head: SupervisedHead | None = None,
                     callback=None) -> TrainResult:
    """Cross-entropy baseline with class-balanced sampling; one epoch is n draws."""
    config = config or TrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    head = head or SupervisedHead(num_classes, encoder.config.embed_dim, seed=config.seed + 2)
    sampler = class_balanced_sampler(labels, config.batch_size, seed=config.seed, num_classes=num_classes)
    steps = max(1, math.ceil(len(chips) / config.batch_size))

    def batches(epoch):
        return [next(sampler) for _ in range(steps)]

    def loss_fn(epoch, idx):
        return supervised_loss(encoder, head, _augmented(chips, config, epoch, idx), labels[idx]), None

    records = _fit(config, encoder.parameters() + head.parameters(), batches, loss_fn, callback=callback)
    return TrainResult(encoder, None, records, {"head": head})


def mean_exact_loss(chips: np.ndarray, encoder: Encoder, bank: MemoryBank, config: TrainConfig | None = None,
                    epoch: int = 0) -> float:
    """Mean per-instance exact-softmax loss of ``encoder`` against ``bank``, with no updates.

    Uses the batches and augmentations the trainer would draw at ``epoch``,
    so models trained with either objective can be compared on one scale.
    """
    config = config or TrainConfig()
    total = 0.0
    for idx in _shuffled(len(chips), config.batch_size, config.seed)(epoch):
        total += ufl_loss_exact(bank, idx, encoder.forward(_augmented(chips, config, epoch, idx))).item()
    return _finite(total / len(chips), epoch)

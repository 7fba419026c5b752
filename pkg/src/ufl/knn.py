"""Weighted k-nearest-neighbour classification over a labelled memory bank."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .train import MemoryBank, UNIT_TOL

log = logging.getLogger(__name__)


def vote_weight(cos_sim, tau: float = 0.07):
    """Contribution exp(cos / tau) of one neighbour to its class vote."""
    return np.exp(np.asarray(cos_sim, dtype=np.float64) / tau)


def _require_labels(bank: MemoryBank) -> np.ndarray:
    if bank.labels is None:
        raise ValueError("weighted KNN needs a labelled memory bank")
    return bank.labels


def neighbours(bank: MemoryBank, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and cosine similarities of the k most similar bank rows per query.

    Ties are broken by smaller row index.
    """
    if k > bank.n:
        raise ValueError(f"k={k} exceeds bank size n={bank.n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1) > UNIT_TOL):
        raise ValueError("queries must be unit vectors")
    sims = q @ bank.vectors.astype(np.float64).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def knn_classify(bank: MemoryBank, query, k: int = 50, tau: float = 0.07) -> list[tuple[int, float]]:
    """Classes voted for by the k nearest bank rows, strongest vote first.

    A class's vote is the sum of exp(cos/tau) over its members among the
    neighbours; ties go to the smaller class id.  Only classes present among
    the neighbours appear.
    """
    labels = _require_labels(bank)
    idx, sims = neighbours(bank, query, k)
    tally: dict[int, float] = {}
    for j, w in zip(idx[0], vote_weight(sims[0], tau)):
        c = int(labels[j])
        tally[c] = tally.get(c, 0.0) + float(w)
    return sorted(tally.items(), key=lambda cw: (-cw[1], cw[0]))


def class_votes(bank: MemoryBank, queries, num_classes: int, k: int = 50, tau: float = 0.07) -> np.ndarray:
    """(Q, C) matrix of vote weights for a batch of queries."""
    labels = _require_labels(bank).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"bank label {labels.max()} outside [0, {num_classes})")
    idx, sims = neighbours(bank, queries, k)
    votes = np.zeros((idx.shape[0], num_classes))
    rows = np.repeat(np.arange(idx.shape[0]), k)
    np.add.at(votes, (rows, labels[idx].reshape(-1)), vote_weight(sims, tau).reshape(-1))
    return votes


def rank_classes(votes: np.ndarray) -> np.ndarray:
    """Full class ranking per row: vote descending, then class id ascending.

    Classes without votes trail in id order, so every row ranks all classes.
    """
    return np.argsort(-votes, axis=1, kind="stable")


# -- metrics ------------------------------------------------------------------


@dataclass
class ClassResult:
    class_id: int
    name: str
    train_count: int
    test_count: int
    top1: float
    top5: float


@dataclass
class EvalReport:
    top1_instance: float
    top5_instance: float
    top1_class: float
    top5_class: float
    per_class: list[ClassResult]
    confusion_top1: np.ndarray
    confusion_top5: np.ndarray
    class_names: list[str] = field(default_factory=list)
    k: int = 50
    tau: float = 0.07

    def to_dict(self) -> dict:
        return {
            "top1_instance": self.top1_instance,
            "top5_instance": self.top5_instance,
            "top1_class": self.top1_class,
            "top5_class": self.top5_class,
            "k": self.k,
            "tau": self.tau,
            "class_names": list(self.class_names),
            "per_class": [asdict(r) for r in self.per_class],
            "confusion_top1": self.confusion_top1.tolist(),
            "confusion_top5": self.confusion_top5.tolist(),
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_per_class_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "train_population", "test_population", "top1", "top5"])
            for r in self.per_class:
                w.writerow([r.name, r.train_count, r.test_count, f"{r.top1:.2f}", f"{r.top5:.2f}"])


def topn_hits(rankings: np.ndarray, truths, n: int) -> np.ndarray:
    truths = np.asarray(truths)
    return np.any(rankings[:, :n] == truths[:, None], axis=1)


def accuracy(hits, truths) -> tuple[float, float]:
    """(instance-averaged, class-averaged) accuracy in percent over classes present in ``truths``."""
    hits = np.asarray(hits, dtype=bool)
    truths = np.asarray(truths)
    if hits.size == 0:
        raise ValueError("no test instances")
    classes = np.unique(truths)
    per_class = [hits[truths == c].mean() for c in classes]
    return 100.0 * hits.mean(), 100.0 * float(np.mean(per_class))


def evaluate_rankings(rankings: np.ndarray, truths, num_classes: int, class_names: Sequence[str] | None = None,
                      train_counts=None, k: int = 50, tau: float = 0.07) -> EvalReport:
    truths = np.asarray(truths, dtype=np.int64)
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    train_counts = np.zeros(num_classes, dtype=np.int64) if train_counts is None else np.asarray(train_counts)
    h1, h5 = topn_hits(rankings, truths, 1), topn_hits(rankings, truths, 5)
    i1, c1 = accuracy(h1, truths)
    i5, c5 = accuracy(h5, truths)
    per_class = []
    for c in np.unique(truths):
        m = truths == c
        per_class.append(ClassResult(int(c), names[c], int(train_counts[c]), int(m.sum()),
                                     100.0 * h1[m].mean(), 100.0 * h5[m].mean()))
    return EvalReport(i1, i5, c1, c5, per_class,
                      confusion_matrix(rankings, truths, "top1", num_classes),
                      confusion_matrix(rankings, truths, "top5", num_classes),
                      names, k, tau)


def evaluate(bank: MemoryBank, test_embeddings, test_labels, k: int = 50, tau: float = 0.07,
             num_classes: int | None = None, class_names: Sequence[str] | None = None) -> EvalReport:
    """Weighted-KNN top-1/top-5 accuracy, instance- and class-averaged."""
    labels = _require_labels(bank).astype(np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(max(labels.max(), test_labels.max())) + 1
    missing = sorted(set(np.unique(test_labels).tolist()) - set(np.unique(labels).tolist()))
    if missing:
        warnings.warn(f"test classes {missing} have no bank instances and can never be predicted", stacklevel=2)
    votes = class_votes(bank, test_embeddings, num_classes, k, tau)
    train_counts = np.bincount(labels, minlength=num_classes)
    return evaluate_rankings(rank_classes(votes), test_labels, num_classes, class_names, train_counts, k, tau)


def confusion_matrix(rankings, truths, mode: str = "top1", num_classes: int | None = None) -> np.ndarray:
    """Rows are true classes; top5 mode credits each of the five best-ranked classes once."""
    if mode not in ("top1", "top5"):
        raise ValueError(f"mode must be 'top1' or 'top5', got {mode!r}")
    rankings = [np.atleast_1d(np.asarray(r, dtype=np.int64)) for r in rankings]
    truths = np.asarray(truths, dtype=np.int64)
    if len(rankings) != len(truths):
        raise ValueError(f"{len(rankings)} rankings but {len(truths)} truths")
    if num_classes is None:
        num_classes = int(max([truths.max(initial=-1)] + [r.max(initial=-1) for r in rankings])) + 1
    depth = 1 if mode == "top1" else 5
    M = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r, t in zip(rankings, truths):
        top = r[:depth]
        if not 0 <= t < num_classes or np.any((top < 0) | (top >= num_classes)):
            raise ValueError(f"class id outside [0, {num_classes}) in truth {t} or ranking {top.tolist()}")
        M[t, top] += 1
    return M


def save_confusion_csv(path, M: np.ndarray, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(class_names))
        for name, row in zip(class_names, M):
            w.writerow([name] + [int(x) if float(x).is_integer() else x for x in row])


def load_confusion_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise ValueError(f"{path}: empty confusion matrix")
    names = rows[0][1:]
    body = rows[1:]
    if len(body) != len(names) or any(len(r) != len(names) + 1 for r in body):
        raise ValueError(f"{path}: confusion matrix is not square with a header row/column")
    if [r[0] for r in body] != names:
        raise ValueError(f"{path}: row labels do not match column labels")
    return np.array([[float(x) for x in r[1:]] for r in body]), names


# -- random-guess baseline ----------------------------------------------------


def _hit_prob_without_replacement(q: np.ndarray, n: int) -> np.ndarray:
    """P(class c is among n successive draws without replacement, weights q).

    Uses the exponential-clock representation: with T_j ~ Exp(q_j) the draw
    order is the order of the T_j, so class c is picked iff fewer than n
    other clocks ring before T_c.
    """
    C = len(q)
    if n >= C:
        return np.ones(C)
    out = np.empty(C)
    for c in range(C):
        others = np.delete(q, c)

        def integrand(t):
            p = 1.0 - np.exp(-others * t)
            dist = np.zeros(n)
            dist[0] = 1.0
            for pj in p:
                dist[1:] = dist[1:] * (1 - pj) + dist[:-1] * pj
                dist[0] *= 1 - pj
            return q[c] * math.exp(-q[c] * t) * dist.sum()

        out[c], _ = integrate.quad(integrand, 0, np.inf, limit=200)
    return out


def random_baseline(train_counts, test_counts, n: int = 1, model: str = "independent",
                    truth_weights: str = "test") -> dict[str, float]:
    """Expected top-n accuracy (percent) of guessing from the training class frequencies.

    ``model="independent"`` scores a class hit with 1 - (1 - q)^n;
    ``"without_replacement"`` draws n distinct classes.  Instance averaging
    weights classes by the test populations (or by the training populations
    with ``truth_weights="train"``); class averaging weights them uniformly
    over classes present in the test set.
    """
    train = np.asarray(train_counts, dtype=np.float64)
    test = np.asarray(test_counts, dtype=np.float64)
    if train.shape != test.shape or train.sum() <= 0 or test.sum() <= 0:
        raise ValueError("train/test counts must have equal length and positive totals")
    q = train / train.sum()
    if model == "independent":
        hit = 1.0 - (1.0 - q) ** n
    elif model == "without_replacement":
        hit = _hit_prob_without_replacement(q, n)
    else:
        raise ValueError(f"unknown model {model!r}")
    weights = {"test": test, "train": train}[truth_weights]
    present = test > 0
    return {
        "instance": 100.0 * float(np.dot(weights / weights.sum(), hit)),
        "class": 100.0 * float(hit[present].mean()),
    }

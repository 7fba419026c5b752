"""Similarity search, K-D tree, intra-class outlier flags and a PCA projection."""

from __future__ import annotations

import csv
import heapq
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .knn import neighbours
from .train import MemoryBank

log = logging.getLogger(__name__)


def nearest_instances(bank: MemoryBank, query, k: int) -> list[tuple[int, float]]:
    """The k bank instances most cosine-similar to ``query`` as (id, similarity), best first."""
    idx, sims = neighbours(bank, query, k)
    return [(int(bank.ids[j]), float(s)) for j, s in zip(idx[0], sims[0])]


# -- K-D tree -----------------------------------------------------------------


@dataclass
class _Node:
    axis: int = -1
    split: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    # leaves only
    rows: np.ndarray | None = None


class KdTree:
    """Median-split K-D tree with exact Euclidean nearest-neighbour queries.

    Splitting axes cycle with depth.  Leaves hold at most ``leaf_size``
    points and are scanned exhaustively; a subtree is skipped only when the
    query's distance to the splitting plane exceeds the current k-th best
    distance, so results equal a brute-force scan (ties go to smaller id).
    """

    def __init__(self, points, ids=None, leaf_size: int = 16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError(f"points must be a non-empty (n, d) array, got shape {pts.shape}")
        self.points = pts
        self.ids = np.arange(len(pts)) if ids is None else np.asarray(ids)
        if len(self.ids) != len(pts):
            raise ValueError("one id per point required")
        self.leaf_size = max(1, int(leaf_size))
        self.root = self._build(np.arange(len(pts)), 0)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.points)

    def _build(self, rows: np.ndarray, depth: int) -> _Node:
        if len(rows) <= self.leaf_size:
            return _Node(rows=rows)
        axis = depth % self.dim
        vals = self.points[rows, axis]
        order = np.argsort(vals, kind="stable")
        mid = len(rows) // 2
        split = float(vals[order[mid]])
        left, right = rows[order[:mid]], rows[order[mid:]]
        return _Node(axis, split, self._build(left, depth + 1), self._build(right, depth + 1))

    def query(self, point, k: int = 1) -> list[tuple[float, int]]:
        """k nearest points as (distance, id), nearest first."""
        q = np.asarray(point, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query of shape {q.shape} does not match tree dimension {self.dim}")
        k = min(k, len(self))
        # max-heap of (-dist2, -id) holding the best k candidates
        heap: list[tuple[float, int]] = []

        def visit(node: _Node) -> None:
            if node.rows is not None:
                d2 = np.sum((self.points[node.rows] - q) ** 2, axis=1)
                for dist2, r in zip(d2, node.rows):
                    item = (-float(dist2), -int(self.ids[r]))
                    if len(heap) < k:
                        heapq.heappush(heap, item)
                    elif item > heap[0]:
                        heapq.heapreplace(heap, item)
                return
            diff = q[node.axis] - node.split
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            visit(near)
            if len(heap) < k or diff * diff <= -heap[0][0]:
                visit(far)

        visit(self.root)
        return [(float(np.sqrt(-d2)), -nid) for d2, nid in sorted(heap, reverse=True)]


def build_kdtree(points, ids=None, leaf_size: int = 16) -> KdTree:
    pts = [np.asarray(p, dtype=np.float64) for p in points] if not isinstance(points, np.ndarray) else points
    if not isinstance(pts, np.ndarray):
        dims = {p.shape for p in pts}
        if len(dims) > 1:
            raise ValueError(f"points have inconsistent dimensions: {sorted(dims)}")
        pts = np.stack(pts) if pts else np.empty((0, 0))
    return KdTree(pts, ids, leaf_size)


# -- outliers -----------------------------------------------------------------


def intra_class_nn_distances(bank: MemoryBank, leaf_size: int = 16) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per class: (instance ids, Euclidean distance to the nearest other member of the class).

    Classes with a single instance are skipped with a warning.
    """
    if bank.labels is None:
        raise ValueError("intra-class distances need a labelled bank")
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    vecs = bank.vectors.astype(np.float64)
    for c in np.unique(bank.labels):
        rows = np.flatnonzero(bank.labels == c)
        if len(rows) < 2:
            warnings.warn(f"class {int(c)} has a single instance; skipped", stacklevel=2)
            continue
        tree = KdTree(vecs[rows], ids=rows, leaf_size=leaf_size)
        dists = np.empty(len(rows))
        for k, r in enumerate(rows):
            hits = tree.query(vecs[r], k=2)
            # two distinct ids come back, at most one of them the query itself
            dists[k] = next(d for d, rid in hits if rid != r)
        out[int(c)] = (bank.ids[rows].astype(np.int64), dists)
    return out


@dataclass
class ClassOutliers:
    class_id: int
    mean: float
    std: float
    threshold: float
    count: int
    flagged: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class OutlierReport:
    classes: dict[int, ClassOutliers]
    sigmas: float = 2.0

    @property
    def flagged_ids(self) -> set[int]:
        return {i for c in self.classes.values() for i, _ in c.flagged}

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        out = []
        for c in sorted(self.classes):
            co = self.classes[c]
            out.append({
                "class_id": c,
                "class_name": class_names[c] if class_names is not None else str(c),
                "mean": co.mean, "std": co.std, "threshold": co.threshold, "count": co.count,
                "flagged": [{"id": i, "distance": d} for i, d in co.flagged],
            })
        return {"sigmas": self.sigmas, "classes": out}

    def save_json(self, path, class_names: Sequence[str] | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(class_names), fh, indent=2)


def flag_outliers(distances: dict[int, tuple[Sequence[int], Sequence[float]]], sigmas: float = 2.0,
                  ddof: int = 0) -> OutlierReport:
    """Flag instances whose distance exceeds mean + sigmas * std of their class.

    ``ddof=0`` is the population standard deviation, ``ddof=1`` the sample one.
    """
    report = {}
    for c, (ids, d) in distances.items():
        d = np.asarray(d, dtype=np.float64)
        ids = np.asarray(ids)
        if len(d) < 2:
            warnings.warn(f"class {c} has fewer than two distances; skipped", stacklevel=2)
            continue
        if np.all(d == d[0]):
            mu, sd = float(d[0]), 0.0
        else:
            mu, sd = float(d.mean()), float(d.std(ddof=ddof))
        thr = mu + sigmas * sd
        hit = np.flatnonzero(d > thr)
        flagged = sorted(((int(ids[h]), float(d[h])) for h in hit), key=lambda t: (-t[1], t[0]))
        report[int(c)] = ClassOutliers(int(c), mu, sd, thr, len(d), flagged)
    return OutlierReport(report, sigmas)


# -- 2-D projection -----------------------------------------------------------


def _top_eigvecs(cov: np.ndarray, k: int, seed: int, tol: float, max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    A = cov.copy()
    vecs, vals = [], []
    def orth(v: np.ndarray) -> np.ndarray:
        # keep later axes orthogonal to earlier ones despite deflation round-off
        for u in vecs:
            v = v - (u @ v) * u
        return v

    for _ in range(k):
        v = orth(rng.standard_normal(A.shape[0]))
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = orth(A @ v)
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * max(1.0, abs(vals[0]) if vals else 1.0):
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
            v = w
            if done:
                break
        lam = float(v @ A @ v)
        # deterministic sign: largest-magnitude component positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs.append(v)
        vals.append(lam)
        A = A - lam * np.outer(v, v)
    return np.array(vals), np.stack(vecs)


def pca_project(points, out_dim: int = 2, seed: int = 0, tol: float = 1e-8, max_iter: int = 10000) -> np.ndarray:
    """Centre and project onto the leading principal axes via power iteration with deflation."""
    X = np.asarray(points.vectors if isinstance(points, MemoryBank) else points, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("pca_project needs at least two points")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / len(X)
    if not np.any(cov):
        warnings.warn("data has zero variance; projection axes are arbitrary", stacklevel=2)
    _, axes = _top_eigvecs(cov, out_dim, seed, tol, max_iter)
    return Xc @ axes.T


# -- exports ------------------------------------------------------------------


def write_retrieval_manifest(path, results: Iterable[dict]) -> None:
    """JSON lines: {"query": id, "ids": [...], "similarities": [...], "chips": [...]}"""
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r) + "\n")


def write_projection_csv(path, ids, coords, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "label"])
        for k, (i, (x, y)) in enumerate(zip(ids, coords[:, :2])):
            w.writerow([int(i), repr(float(x)), repr(float(y)), "" if labels is None else int(labels[k])])

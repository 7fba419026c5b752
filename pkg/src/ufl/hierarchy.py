"""Class hierarchies from classifier confusion: dissimilarity, agglomeration, dendrogram export."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def similarity_from_confusion(M) -> np.ndarray:
    """Turn a confusion matrix into a class dissimilarity matrix D.

    Rows are normalised to frequencies (an all-zero row becomes the identity
    row), symmetrised, and inverted, so D is symmetric with zero diagonal and
    entries in [0, 1]: often-confused pairs sit near 0, never-confused ones
    at 1.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {M.shape}")
    if M.shape[0] < 2:
        raise ValueError("need at least two classes")
    if np.any(M < 0) or not np.all(np.isfinite(M)):
        bad = tuple(int(i) for i in np.argwhere(~(M >= 0))[0]) if np.any(~(M >= 0)) else ()
        raise ValueError(f"confusion matrix has a negative or non-finite entry at {bad}")
    sums = M.sum(axis=1, keepdims=True)
    R = np.where(sums > 0, M / np.where(sums > 0, sums, 1.0), np.eye(len(M)))
    S = (R + R.T) / 2
    D = np.clip(1.0 - S, 0.0, 1.0)
    D = (D + D.T) / 2
    np.fill_diagonal(D, 0.0)
    return D


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    height: float
    node: int


@dataclass
class Dendrogram:
    merges: list[Merge]
    n_leaves: int
    linkage: str = "average"

    @property
    def root(self) -> int:
        return self.merges[-1].node if self.merges else 0

    def children(self) -> dict[int, tuple[int, int]]:
        return {m.node: (m.a, m.b) for m in self.merges}

    def heights(self) -> dict[int, float]:
        h = {i: 0.0 for i in range(self.n_leaves)}
        h.update({m.node: m.height for m in self.merges})
        return h

    def clusters(self, names: Sequence[str] | None = None) -> set[frozenset]:
        """Leaf sets of every internal node, used to compare topologies."""
        names = list(names) if names is not None else list(range(self.n_leaves))
        members = {i: frozenset([names[i]]) for i in range(self.n_leaves)}
        for m in self.merges:
            members[m.node] = members[m.a] | members[m.b]
        return {members[m.node] for m in self.merges}


def agglomerate(D, linkage: str = "average") -> Dendrogram:
    """Bottom-up clustering of a dissimilarity matrix.

    Leaves are 0..C-1 and the k-th merge creates node C+k.  Each step joins
    the closest pair of clusters; ties go to the pair with the smaller
    (first id, second id).
    """
    D = np.array(D, dtype=np.float64)
    if np.isnan(D).any():
        raise ValueError("dissimilarity matrix contains NaN")
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"dissimilarity matrix must be square, got shape {D.shape}")
    if linkage not in ("average", "single", "complete"):
        raise ValueError(f"unknown linkage {linkage!r}")
    C = len(D)
    size = {i: 1 for i in range(C)}
    dist = {(i, j): D[i, j] for i in range(C) for j in range(i + 1, C)}
    active = list(range(C))
    merges: list[Merge] = []
    next_id = C
    while len(active) > 1:
        (a, b), h = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        merges.append(Merge(a, b, float(h), next_id))
        active.remove(a)
        active.remove(b)
        for c in active:
            dac = dist.pop((min(a, c), max(a, c)))
            dbc = dist.pop((min(b, c), max(b, c)))
            if linkage == "average":
                d = (size[a] * dac + size[b] * dbc) / (size[a] + size[b])
            elif linkage == "single":
                d = min(dac, dbc)
            else:
                d = max(dac, dbc)
            dist[(c, next_id)] = d
        del dist[(a, b)]
        size[next_id] = size.pop(a) + size.pop(b)
        active.append(next_id)
        next_id += 1
    heights = [m.height for m in merges]
    if linkage == "average" and any(h2 < h1 for h1, h2 in zip(heights, heights[1:])):
        raise AssertionError("average-linkage merge heights decreased")
    return Dendrogram(merges, C, linkage)


# -- export -------------------------------------------------------------------

_PLAIN = re.compile(r"^[^\s(),:;'\[\]]+$")


def quote_name(name: str) -> str:
    return name if _PLAIN.match(name) else "'" + name.replace("'", "''") + "'"


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def to_newick(dg: Dendrogram, names: Sequence[str]) -> str:
    """Newick text whose branch lengths are parent height minus child height."""
    if len(names) != dg.n_leaves:
        raise ValueError(f"{len(names)} names for {dg.n_leaves} leaves")
    if dg.n_leaves == 1:
        return quote_name(names[0]) + ";"
    kids = dg.children()
    h = dg.heights()

    def render(node: int) -> str:
        if node < dg.n_leaves:
            return quote_name(names[node])
        a, b = kids[node]
        return f"({render(a)}:{_fmt(h[node] - h[a])},{render(b)}:{_fmt(h[node] - h[b])})"

    return render(dg.root) + ";"


def parse_newick(text: str) -> set[frozenset]:
    """Internal-node leaf sets of a Newick tree (branch lengths ignored)."""
    s = text.strip()
    pos = 0
    clusters: set[frozenset] = set()

    def name() -> str:
        nonlocal pos
        if s[pos] == "'":
            out, pos = [], pos + 1
            while True:
                if s[pos] == "'" and s[pos + 1:pos + 2] == "'":
                    out.append("'")
                    pos += 2
                elif s[pos] == "'":
                    pos += 1
                    return "".join(out)
                else:
                    out.append(s[pos])
                    pos += 1
        start = pos
        while s[pos] not in "(),:;":
            pos += 1
        return s[start:pos].strip()

    def length() -> None:
        nonlocal pos
        if s[pos] == ":":
            pos += 1
            while s[pos] not in ",);":
                pos += 1

    def node() -> frozenset:
        nonlocal pos
        if s[pos] == "(":
            pos += 1
            members = node()
            while s[pos] == ",":
                pos += 1
                members = members | node()
            if s[pos] != ")":
                raise ValueError(f"malformed Newick at character {pos}")
            pos += 1
            if s[pos] not in ",):;":
                name()
            length()
            clusters.add(members)
            return members
        leaf = name()
        length()
        return frozenset([leaf])

    node()
    if s[pos] != ";":
        raise ValueError(f"malformed Newick at character {pos}")
    return clusters


def to_json(dg: Dendrogram, names: Sequence[str]) -> dict:
    if len(names) != dg.n_leaves:
        raise ValueError(f"{len(names)} names for {dg.n_leaves} leaves")
    return {
        "leaves": list(names),
        "linkage": dg.linkage,
        "merges": [{"a": m.a, "b": m.b, "height": m.height, "node": m.node} for m in dg.merges],
    }


def from_json(obj: dict) -> tuple[Dendrogram, list[str]]:
    merges = [Merge(int(m["a"]), int(m["b"]), float(m["height"]), int(m["node"])) for m in obj["merges"]]
    return Dendrogram(merges, len(obj["leaves"]), obj.get("linkage", "average")), list(obj["leaves"])


def to_text(dg: Dendrogram, names: Sequence[str]) -> str:
    """Indented tree for terminal display, one node per line."""
    if len(names) != dg.n_leaves:
        raise ValueError(f"{len(names)} names for {dg.n_leaves} leaves")
    kids, h = dg.children(), dg.heights()
    lines: list[str] = []

    def walk(node: int, depth: int) -> None:
        pad = "  " * depth
        if node < dg.n_leaves:
            lines.append(f"{pad}{names[node]}")
            return
        lines.append(f"{pad}+ {_fmt(h[node])}")
        for child in kids[node]:
            walk(child, depth + 1)

    walk(dg.root, 0)
    return "\n".join(lines) + "\n"


def export_dendrogram(dg: Dendrogram, names: Sequence[str]) -> tuple[str, str]:
    """(Newick text, JSON merge list text)."""
    return to_newick(dg, names), json.dumps(to_json(dg, names), indent=2)

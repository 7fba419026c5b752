import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufl.data.fileio import read_populations
from ufl.knn import (accuracy, class_votes, confusion_matrix, evaluate, evaluate_rankings, knn_classify,
                     load_confusion_csv, rank_classes, random_baseline, save_confusion_csv, topn_hits, vote_weight)
from ufl.train import MemoryBank


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _angle(deg):
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r), 0.0])


def test_vote_ratio_zero_vs_thirty_degrees():
    ratio = vote_weight(1.0) / vote_weight(math.cos(math.radians(30)))
    assert ratio == pytest.approx(math.exp((1 - math.cos(math.radians(30))) / 0.07))
    assert ratio == pytest.approx(6.78, abs=0.01)


def test_close_neighbour_outvotes_two_farther():
    c09 = math.degrees(math.acos(0.9))
    bank = MemoryBank(np.stack([_angle(0), _angle(c09), _angle(-c09), _angle(90)]), labels=[0, 1, 1, 2])
    ranked = knn_classify(bank, _angle(0), k=3)
    assert [c for c, _ in ranked] == [0, 1]
    assert ranked[0][1] == pytest.approx(math.exp(1 / 0.07), rel=1e-6)
    assert ranked[1][1] == pytest.approx(2 * math.exp(0.9 / 0.07), rel=1e-6)
    assert ranked[0][1] == pytest.approx(1.60e6, rel=0.01) and ranked[1][1] == pytest.approx(7.66e5, rel=0.01)


def test_single_class_neighbourhood():
    rng = np.random.default_rng(0)
    V = _unit(rng.normal(size=(10, 4)))
    bank = MemoryBank(V, labels=[3] * 10)
    q = V[0]
    ranked = knn_classify(bank, q, k=5)
    sims = np.sort(V @ q)[::-1][:5]
    assert len(ranked) == 1 and ranked[0][0] == 3
    assert ranked[0][1] == pytest.approx(vote_weight(sims).sum())


def test_knn_errors():
    V = np.eye(3)
    with pytest.raises(ValueError, match="labelled"):
        knn_classify(MemoryBank(V), V[0], k=1)
    with pytest.raises(ValueError, match="exceeds"):
        knn_classify(MemoryBank(V, labels=[0, 1, 2]), V[0], k=4)
    with pytest.raises(ValueError, match="unit"):
        knn_classify(MemoryBank(V, labels=[0, 1, 2]), [2.0, 0, 0], k=1)


def test_tie_goes_to_smaller_class():
    bank = MemoryBank(np.stack([_angle(10), _angle(-10)]), labels=[5, 2])
    assert [c for c, _ in knn_classify(bank, _angle(0), k=2)] == [2, 5]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_ranking_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    V = _unit(rng.normal(size=(40, 6)))
    labels = rng.integers(0, 4, 40)
    q = _unit(rng.normal(size=6))
    R, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = knn_classify(MemoryBank(V, labels=labels), q, k=10)
    b = knn_classify(MemoryBank(V @ R.T, labels=labels), R @ q, k=10)
    assert [c for c, _ in a] == [c for c, _ in b]
    assert np.allclose([w for _, w in a], [w for _, w in b], rtol=1e-6)
    assert all(w > 0 for _, w in a)


def test_class_votes_match_single_queries():
    rng = np.random.default_rng(1)
    V = _unit(rng.normal(size=(30, 5)))
    labels = rng.integers(0, 3, 30)
    bank = MemoryBank(V, labels=labels)
    Q = _unit(rng.normal(size=(4, 5)))
    votes = class_votes(bank, Q, 3, k=7)
    for q, row in zip(Q, votes):
        tally = dict(knn_classify(bank, q, k=7))
        assert np.allclose(row, [tally.get(c, 0.0) for c in range(3)])
    # classes without votes still get a rank, after every voted class
    assert rank_classes(np.array([[0.0, 2.0, 0.0, 1.0]])).tolist() == [[1, 3, 0, 2]]


# -- metrics ------------------------------------------------------------------


def test_instance_versus_class_average():
    truths = np.array([0] * 90 + [1] * 10)
    hits = truths == 0
    inst, cls = accuracy(hits, truths)
    assert inst == pytest.approx(90.0) and cls == pytest.approx(50.0)
    assert accuracy(np.ones(5, bool), [0, 1, 2, 2, 1]) == (100.0, 100.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_top1_implies_top5_and_duplication(seed):
    rng = np.random.default_rng(seed)
    C, n = 7, 60
    truths = rng.integers(0, C, n)
    rankings = np.stack([rng.permutation(C) for _ in range(n)])
    h1, h5 = topn_hits(rankings, truths, 1), topn_hits(rankings, truths, 5)
    assert np.all(h5[h1])
    c = truths[0]
    dup = truths == c
    _, cls = accuracy(h1, truths)
    _, cls2 = accuracy(np.concatenate([h1, h1[dup]]), np.concatenate([truths, truths[dup]]))
    assert cls2 == pytest.approx(cls)
    rep = evaluate_rankings(rankings, truths, C)
    assert 0 <= rep.top1_class <= rep.top5_class <= 100
    assert rep.top1_instance == pytest.approx(100 * h1.mean())


def test_evaluate_end_to_end_and_missing_class_warning():
    V = np.eye(4)
    bank = MemoryBank(V, labels=[0, 0, 1, 1])
    with pytest.warns(UserWarning, match=r"\[2\]"):
        rep = evaluate(bank, V, [0, 0, 1, 2], k=1, num_classes=3)
    assert rep.top1_instance == pytest.approx(75.0)
    assert rep.top1_class == pytest.approx(100 * (1 + 1 + 0) / 3)
    assert [r.train_count for r in rep.per_class] == [2, 2, 0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        evaluate(bank, V[:3], [0, 0, 1], k=1)


# -- random baseline ----------------------------------------------------------


def test_building_class_guess():
    rows = read_populations()
    train = np.array([r[1] for r in rows])
    q = train[[r[0] for r in rows].index("Building")] / train.sum()
    assert q == pytest.approx(307221 / 589119)
    assert round(100 * q) == 52
    assert round(100 * (1 - (1 - q) ** 5)) == 97


def test_table_baseline_values():
    rows = read_populations()
    train, test = [r[1] for r in rows], [r[2] for r in rows]
    top1 = random_baseline(train, test, 1)
    top5 = random_baseline(train, test, 5)
    # class-averaged top-1 under frequency guessing is the mean of q, i.e. 1/C
    assert top1["class"] == pytest.approx(100 / 60)
    assert top1["instance"] == pytest.approx(40.1, abs=0.5)
    assert top5["instance"] == pytest.approx(82.1, abs=0.1)
    assert top5["class"] == pytest.approx(4.1, abs=0.05)
    train_w = random_baseline(train, test, 5, truth_weights="train")
    assert train_w["instance"] == pytest.approx(83.2, abs=0.05)
    assert random_baseline(train, test, 1, truth_weights="train")["instance"] == pytest.approx(40.1, abs=0.05)


def test_baseline_single_class_and_exhaustion():
    for model in ("independent", "without_replacement"):
        assert random_baseline([5], [3], 1, model) == {"instance": 100.0, "class": 100.0}
    full = random_baseline([5, 3, 2], [1, 1, 1], 3, "without_replacement")
    assert full["instance"] == pytest.approx(100.0) and full["class"] == pytest.approx(100.0)


def test_without_replacement_matches_enumeration():
    q = np.array([0.5, 0.3, 0.15, 0.05])
    # exact probability that each class appears within two draws without replacement
    exact = np.zeros(4)
    for i in range(4):
        for j in range(4):
            if i != j:
                p = q[i] * q[j] / (1 - q[i])
                exact[i] += p
                exact[j] += p
    got = random_baseline(q * 100, np.eye(4)[0], 2, "without_replacement")
    assert got["instance"] == pytest.approx(100 * exact[0], rel=1e-6)
    assert got["class"] == pytest.approx(100 * exact[0], rel=1e-6)
    got_all = random_baseline(q * 100, [1, 1, 1, 1], 2, "without_replacement")
    assert got_all["class"] == pytest.approx(100 * exact.mean(), rel=1e-6)


def test_baseline_errors():
    with pytest.raises(ValueError):
        random_baseline([1, 2], [1], 1)
    with pytest.raises(ValueError):
        random_baseline([0, 0], [1, 1], 1)
    with pytest.raises(ValueError):
        random_baseline([1], [1], 1, "bogus")


# -- confusion ----------------------------------------------------------------


def test_confusion_examples(tmp_path):
    truths = np.array([0, 1, 1, 2])
    perfect = [[t] + [c for c in range(6) if c != t] for t in truths]
    M1 = confusion_matrix(perfect, truths, "top1", 6)
    assert np.array_equal(M1, np.diag([1, 2, 1, 0, 0, 0]))
    M5 = confusion_matrix(perfect, truths, "top5", 6)
    assert M5.sum(axis=1).tolist() == [5, 10, 5, 0, 0, 0]
    assert confusion_matrix([[0], [1]], [0, 0], "top1").tolist() == [[1, 1], [0, 0]]
    with pytest.raises(ValueError):
        confusion_matrix([[3]], [0], "top1", 2)
    with pytest.raises(ValueError):
        confusion_matrix([[0]], [0, 1], "top1")
    save_confusion_csv(tmp_path / "c.csv", M5[:3, :3], ["a", "b,c", "d"])
    back, names = load_confusion_csv(tmp_path / "c.csv")
    assert names == ["a", "b,c", "d"] and np.array_equal(back, M5[:3, :3])

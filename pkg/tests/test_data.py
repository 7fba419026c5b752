import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from ufl.data import fileio
from ufl.data.augment import AugmentConfig, augment, augment_batch, jitter, rotate90
from ufl.data.chips import Annotation, chip_window, extract_chips, resize_chip
from ufl.data.synth import SynthConfig, class_sizes, synth_dataset
from ufl.models import Encoder, FormatError, parametric_softmax
from ufl.train import MemoryBank, TrainConfig, init_bank, train_supervised
from ufl.knn import evaluate_rankings


def _image(h=100, w=100, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


# -- chips --------------------------------------------------------------------


def test_chip_worked_examples():
    img = _image()
    anns = [Annotation("a", (10, 20, 30, 60), 1), Annotation("a", (0, 0, 10, 50), 2),
            Annotation("a", (40, 40, 60, 60), 3)]
    res = extract_chips(anns, {"a": img})
    assert res.kept == [0, 2]
    first, square = res.chips
    assert (first.window.x0, first.window.y0, first.window.side) == (0, 20, 40)
    assert np.array_equal(first.pixels, img[20:60, 0:40])
    assert res.discarded[0].index == 1 and "boundary" in res.discarded[0].reason
    assert np.array_equal(square.pixels, img[40:60, 40:60])


def test_unreadable_image_is_logged():
    def loader(name):
        raise OSError("corrupt")

    res = extract_chips([Annotation("x.png", (0, 0, 2, 2), 0)], loader)
    assert not res.chips and res.discarded[0].reason.startswith("unreadable image")


def test_degenerate_bbox_rejected():
    with pytest.raises(ValueError):
        Annotation("a", (5, 5, 5, 9), 0)


boxes = st.tuples(st.integers(0, 80), st.integers(0, 60), st.integers(1, 50), st.integers(1, 50)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=60, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=25), st.randoms(use_true_random=False))
def test_chip_properties(bbox_list, rnd):
    img = _image(80, 120)
    anns = [Annotation("img", b, k % 3) for k, b in enumerate(bbox_list)]
    res = extract_chips(anns, {"img": img})
    assert sorted(res.kept + [d.index for d in res.discarded]) == list(range(len(anns)))
    for chip in res.chips:
        win = chip.window
        assert chip.pixels.shape[0] == chip.pixels.shape[1] == win.side
        assert win.inside(120, 80)
    shuffled = anns[:]
    rnd.shuffle(shuffled)
    key = lambda r: {(c.annotation, c.pixels.tobytes()) for c in r.chips}  # noqa: E731
    assert key(extract_chips(shuffled, {"img": img})) == key(res)


def test_chip_window_centre_rounding():
    # centre 2.5, side 3 -> x0 = round_half_up(1.0) = 1
    assert chip_window((1, 0, 4, 3)) == chip_window((1, 0, 4, 3))
    assert chip_window((1, 0, 4, 3)).x0 == 1
    # odd/even mix: side 4, centre 2.5 -> 0.5 rounds up to 1
    assert chip_window((1, 0, 4, 4)).x0 == 1


def test_resize_chip():
    out = resize_chip(_image(40, 40), 32)
    assert out.shape == (32, 32, 3) and out.dtype == np.uint8
    same = _image(32, 32)
    assert np.array_equal(resize_chip(same, 32), same)


# -- augmentation -------------------------------------------------------------


def test_rotation_examples():
    a = np.array([[1, 2], [3, 4]])[:, :, None]
    assert np.array_equal(rotate90(a)[:, :, 0], [[3, 1], [4, 2]])
    x = _image(5, 5)
    assert np.array_equal(rotate90(rotate90(rotate90(rotate90(x)))), x)


def test_jitter_identity():
    x = _image(6, 6)
    assert np.array_equal(jitter(x, [1.0, 1.0, 1.0]), x)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 20))
def test_augment_preserves_shape_and_range(seed, side):
    x = _image(side, side, seed % 1000)
    y = augment(x, AugmentConfig(shift=2), seed)
    assert y.shape == x.shape and y.dtype == np.uint8


def test_augment_batch_deterministic():
    chips = np.stack([_image(8, 8, s) for s in range(4)])
    a = augment_batch(chips, AugmentConfig(), 1, 2, [5, 6, 7, 8])
    b = augment_batch(chips, AugmentConfig(), 1, 2, [5, 6, 7, 8])
    assert np.array_equal(a, b)
    assert np.array_equal(augment_batch(chips, AugmentConfig.disabled(), 1, 2, range(4)), chips)


# -- synthetic data -----------------------------------------------------------


def test_class_sizes_imbalance():
    sizes = class_sizes(8, 5000, SynthConfig.exponent_for_ratio(8, 100))
    assert sizes.sum() == 5000
    assert sizes[0] / sizes[-1] == pytest.approx(100, rel=0.02)
    flat = class_sizes(8, 5003, 0.0)
    assert flat.max() - flat.min() <= 1


def test_synth_deterministic_and_split():
    cfg = SynthConfig(num_classes=3, total=60, seed=7)
    a, b = synth_dataset(cfg), synth_dataset(cfg)
    assert a.checksum() == b.checksum()
    assert a.chips.tobytes() == b.chips.tobytes()
    assert np.sum(a.split == "test") == 12
    assert set(np.unique(a.subset("test").labels)) == {0, 1, 2}
    assert synth_dataset(SynthConfig(num_classes=3, total=60, seed=8)).checksum() != a.checksum()


@pytest.mark.slow
def test_balanced_synthetic_is_learnable():
    ds = synth_dataset(SynthConfig(num_classes=8, total=5000, seed=0))
    tr, te = ds.subset("train"), ds.subset("test")
    res = train_supervised(tr.chips, tr.labels, Encoder(), TrainConfig(epochs=30), num_classes=8)
    p = parametric_softmax(res.extra["head"], res.encoder.embed(te.chips))
    report = evaluate_rankings(np.argsort(-p, axis=1, kind="stable"), te.labels, 8)
    assert report.top1_instance >= 90.0


# -- files --------------------------------------------------------------------


def test_bank_round_trip_bit_identical(tmp_path):
    bank = init_bank(100, 16, seed=3, labels=np.arange(100) % 5)
    fileio.save_bank(tmp_path / "b.bin", bank)
    back = fileio.load_bank(tmp_path / "b.bin")
    assert back.vectors.tobytes() == bank.vectors.tobytes()
    assert back.ids.tobytes() == bank.ids.tobytes()
    assert np.array_equal(back.labels, bank.labels)
    assert fileio.bank_to_bytes(back) == (tmp_path / "b.bin").read_bytes()
    unlabelled = init_bank(4, 3)
    assert fileio.bank_from_bytes(fileio.bank_to_bytes(unlabelled)).labels is None


def test_bank_header_layout():
    raw = fileio.bank_to_bytes(MemoryBank(np.eye(2), labels=[0, 1]))
    assert raw[:4] == b"UFLB"
    assert len(raw) == 20 + 2 * 2 * 4 + 2 * 8 + 2 * 4


@pytest.mark.parametrize("cut", [3, 10, 25, -1])
def test_truncated_bank_raises(cut):
    raw = fileio.bank_to_bytes(init_bank(5, 4, labels=[0] * 5))
    with pytest.raises(FormatError, match="offset"):
        fileio.bank_from_bytes(raw[:cut])


def test_bank_trailing_bytes_raise():
    raw = fileio.bank_to_bytes(init_bank(5, 4))
    with pytest.raises(FormatError, match="trailing"):
        fileio.bank_from_bytes(raw + b"\0")


def test_manifest_and_chip_index(tmp_path):
    Image.fromarray(_image(50, 60)).save(tmp_path / "scene.png")
    anns = [Annotation("scene.png", (5, 5, 15, 25), 2), Annotation("scene.png", (0, 0, 30, 4), 1)]
    fileio.write_manifest(tmp_path / "m.jsonl", anns)
    back = fileio.read_manifest(tmp_path / "m.jsonl")
    assert back[0].image == str(tmp_path / "scene.png") and back[0].bbox == (5, 5, 15, 25)
    res = extract_chips(back)
    index = fileio.write_chips(tmp_path / "out", res.chips)
    rows = index.read_text().splitlines()
    assert rows[0] == "chip_path,class_id,source_image,bbox,split"
    assert len(rows) == 2 and len(res.discarded) == 1
    (tmp_path / "bad.jsonl").write_text('{"image": "x"}\n')
    with pytest.raises(FormatError, match="line 1"):
        fileio.read_manifest(tmp_path / "bad.jsonl")


def test_dataset_round_trip(tmp_path):
    ds = synth_dataset(SynthConfig(num_classes=3, total=30, seed=1))
    fileio.save_dataset(tmp_path / "ds", ds)
    back = fileio.load_dataset(tmp_path / "ds")
    assert back.checksum() == ds.checksum()
    assert back.class_names == ds.class_names
    assert json.loads((tmp_path / "ds" / "classes.json").read_text()) == ds.class_names


def test_shipped_populations():
    rows = fileio.read_populations()
    assert len(rows) == 60
    assert sum(r[1] for r in rows) == 589119
    assert sum(r[2] for r in rows) == 187156
    building = [r for r in rows if r[0] == "Building"][0]
    assert building[1] == 307221


def test_population_round_trip(tmp_path):
    rows = [("a", 3, 1), ("b c", 5, 2)]
    fileio.write_populations(tmp_path / "p.csv", rows)
    assert fileio.read_populations(tmp_path / "p.csv") == rows
    (tmp_path / "bad.csv").write_text("name,n\n")
    with pytest.raises(FormatError):
        fileio.read_populations(tmp_path / "bad.csv")

"""Tests for IDX parsing, image quartering, and input perturbations."""

import gzip

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import DATA_DIR
from modfuse.mnist import (
    QUARTER_DIM,
    QUARTER_NAMES,
    QuarteredImage,
    load_idx,
    load_mnist,
    occlude,
    occlude_batch,
    pepper_noise,
    pepper_noise_batch,
    quarter_split,
    quarter_split_batch,
    read_idx,
    reassemble,
    reassemble_batch,
    write_idx,
)
from modfuse.numerics import SeededRng


@pytest.fixture(scope="module")
def mnist():
    return load_mnist(DATA_DIR)


# ---------------------------------------------------------------------------
# IDX files


def test_idx_round_trip(tmp_path):
    rng = SeededRng(0)
    for i, shape in enumerate([(7,), (5, 4), (3, 6, 2)]):
        data = rng.split(i).integers(0, 256, size=shape).astype(np.uint8)
        path = tmp_path / f"case{i}.idx"
        write_idx(data, path)
        assert_array_equal(read_idx(path), data)


def test_idx_round_trip_bytes_identical(tmp_path):
    data = SeededRng(1).split(0).integers(0, 256, size=(4, 9)).astype(np.uint8)
    p1, p2 = tmp_path / "a.idx", tmp_path / "b.idx"
    write_idx(data, p1)
    write_idx(read_idx(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_idx_reads_gzip(tmp_path):
    data = SeededRng(2).split(0).integers(0, 256, size=(10, 3)).astype(np.uint8)
    plain = tmp_path / "plain.idx"
    write_idx(data, plain)
    zipped = tmp_path / "zipped.idx.gz"
    zipped.write_bytes(gzip.compress(plain.read_bytes()))
    assert_array_equal(read_idx(zipped), data)


def test_idx_error_offsets(tmp_path):
    short = tmp_path / "short.idx"
    short.write_bytes(b"\x00\x00\x08")
    with pytest.raises(ValueError, match="header needs 4"):
        read_idx(short)

    magic = tmp_path / "magic.idx"
    magic.write_bytes(b"\x07\x00\x08\x01\x00\x00\x00\x01\x2a")
    with pytest.raises(ValueError, match="offset 0"):
        read_idx(magic)

    dtype = tmp_path / "dtype.idx"
    dtype.write_bytes(b"\x00\x00\x0d\x01\x00\x00\x00\x01\x2a")
    with pytest.raises(ValueError, match="offset 2"):
        read_idx(dtype)

    truncated = tmp_path / "trunc.idx"
    good = b"\x00\x00\x08\x01" + (10).to_bytes(4, "big") + bytes(range(10))
    truncated.write_bytes(good[:-3])
    with pytest.raises(ValueError, match="expected 18 bytes.*got 15"):
        read_idx(truncated)

    headless = tmp_path / "headless.idx"
    headless.write_bytes(b"\x00\x00\x08\x02\x00\x00\x00\x05")
    with pytest.raises(ValueError, match="header needs 12"):
        read_idx(headless)


def test_load_idx_pairing(tmp_path):
    images = SeededRng(3).split(0).integers(0, 256,
                                            size=(6, 28, 28)).astype(np.uint8)
    labels = np.arange(6, dtype=np.uint8)
    ipath, lpath = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(images, ipath)
    write_idx(labels, lpath)
    x, y = load_idx(ipath, lpath)
    assert x.dtype == np.float64 and y.dtype == np.int64
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert_array_equal(np.round(x * 255.0).astype(np.uint8), images)
    assert_array_equal(y, labels)

    write_idx(labels[:5], lpath)
    with pytest.raises(ValueError, match="6 images but 5 labels"):
        load_idx(ipath, lpath)
    with pytest.raises(ValueError, match="expected 3 dimensions"):
        load_idx(lpath, lpath)


def test_load_mnist_layout(mnist):
    (train_x, train_y), (test_x, test_y) = mnist
    assert train_x.shape == (60000, 28, 28)
    assert test_x.shape == (10000, 28, 28)
    assert train_y.shape == (60000,) and test_y.shape == (10000,)
    assert train_x.min() == 0.0 and train_x.max() == 1.0
    assert set(np.unique(train_y)) == set(range(10))
    # leading labels of the standard files, as a corruption canary
    assert list(train_y[:5]) == [5, 0, 4, 1, 9]
    assert list(test_y[:5]) == [7, 2, 1, 0, 4]


# ---------------------------------------------------------------------------
# quartering


def test_quarter_layout():
    image = np.arange(28 * 28, dtype=np.float64).reshape(28, 28)
    q = quarter_split(image, label=3)
    assert [x.shape for x in q.quarters] == [(QUARTER_DIM,)] * 4
    assert q.label == 3
    assert_array_equal(q.quarters[0], image[:14, :14].ravel())
    assert_array_equal(q.quarters[1], image[:14, 14:].ravel())
    assert_array_equal(q.quarters[2], image[14:, :14].ravel())
    assert_array_equal(q.quarters[3], image[14:, 14:].ravel())
    assert q.quarters[0][0] == image[0, 0]
    assert len(QUARTER_NAMES) == 4


def test_quarter_reassemble_identity(mnist):
    _, (test_x, _) = mnist
    pick = SeededRng(4).split(0).permutation(test_x.shape[0])[:100]
    images = test_x[pick]
    quarters = quarter_split_batch(images)
    assert [q.shape for q in quarters] == [(100, QUARTER_DIM)] * 4
    assert_array_equal(reassemble_batch(quarters), images)
    one = quarter_split(images[0])
    assert_array_equal(reassemble(one), images[0])


def test_quarter_split_accepts_flat_rows():
    image = SeededRng(5).split(0).uniform(size=(2, 28 * 28))
    quarters = quarter_split_batch(image)
    assert_array_equal(reassemble_batch(quarters),
                       image.reshape(2, 28, 28))


def test_quarter_validation():
    with pytest.raises(ValueError):
        quarter_split_batch(np.zeros((5, 27, 28)))
    with pytest.raises(ValueError):
        reassemble_batch([np.zeros((5, QUARTER_DIM))] * 3)
    with pytest.raises(ValueError):
        QuarteredImage([np.zeros(QUARTER_DIM)] * 3)


def test_quartered_image_as_sample_copies():
    q = quarter_split(np.ones((28, 28)), label=7)
    sample = q.as_sample()
    sample.xs[0][:] = -1.0
    assert q.quarters[0][0] == 1.0
    assert sample.y == 7


# ---------------------------------------------------------------------------
# occlusion


def test_occlude_batch_semantics():
    xs = [SeededRng(6).split(k).uniform(size=(8, QUARTER_DIM))
          for k in range(4)]
    originals = [x.copy() for x in xs]

    same, presence = occlude_batch(xs, ())
    for a, b in zip(same, originals):
        assert_array_equal(a, b)
    assert_array_equal(presence, np.ones((8, 4)))

    dark, presence = occlude_batch(xs, (1, 3))
    assert_array_equal(dark[1], np.zeros((8, QUARTER_DIM)))
    assert_array_equal(dark[3], np.zeros((8, QUARTER_DIM)))
    assert_array_equal(dark[0], originals[0])
    assert_array_equal(dark[2], originals[2])
    assert_array_equal(presence[:, [0, 2]], np.ones((8, 2)))
    assert_array_equal(presence[:, [1, 3]], np.zeros((8, 2)))
    # inputs are never mutated
    for x, o in zip(xs, originals):
        assert_array_equal(x, o)

    gone, presence = occlude_batch(xs, range(4))
    assert all(not g.any() for g in gone)
    assert not presence.any()


def test_occlude_single_image():
    q = quarter_split(np.ones((28, 28)), label=2)
    sample = occlude(q, (0,))
    assert_array_equal(sample.xs[0], np.zeros(QUARTER_DIM))
    assert_array_equal(sample.presence, [0.0, 1.0, 1.0, 1.0])
    assert sample.y == 2


def test_occlude_rejects_bad_segment():
    xs = [np.ones((2, QUARTER_DIM))] * 4
    with pytest.raises(ValueError, match="segment index"):
        occlude_batch(xs, (4,))
    with pytest.raises(ValueError):
        occlude_batch(xs, (-1,))


# ---------------------------------------------------------------------------
# pepper noise


def test_pepper_rate_zero_identity():
    xs = [SeededRng(7).split(k).uniform(size=(5, QUARTER_DIM))
          for k in range(4)]
    out = pepper_noise_batch(xs, 0.0, SeededRng(8))
    for a, b in zip(out, xs):
        assert_array_equal(a, b)


def test_pepper_rate_one_blanks_targets():
    xs = [np.ones((5, QUARTER_DIM)) for _ in range(4)]
    out = pepper_noise_batch(xs, 1.0, SeededRng(9), segments=(0, 2))
    assert not out[0].any() and not out[2].any()
    assert_array_equal(out[1], xs[1])
    assert_array_equal(out[3], xs[3])


def test_pepper_concentration():
    # 4 x 250 x 196 = 196000 pixels, all ink: zeroed share ~ rate
    xs = [np.ones((250, QUARTER_DIM)) for _ in range(4)]
    out = pepper_noise_batch(xs, 0.5, SeededRng(10))
    zeroed = sum(int((o == 0.0).sum()) for o in out)
    share = zeroed / (4 * 250 * QUARTER_DIM)
    assert 0.49 <= share <= 0.51


def test_pepper_deterministic_and_seed_sensitive():
    xs = [np.ones((20, QUARTER_DIM)) for _ in range(4)]
    a = pepper_noise_batch(xs, 0.3, SeededRng(11))
    b = pepper_noise_batch(xs, 0.3, SeededRng(11))
    c = pepper_noise_batch(xs, 0.3, SeededRng(12))
    for q_a, q_b in zip(a, b):
        assert_array_equal(q_a, q_b)
    assert any(np.any(q_a != q_c) for q_a, q_c in zip(a, c))


def test_pepper_duplicate_segments_collapse():
    xs = [np.ones((10, QUARTER_DIM)) for _ in range(4)]
    a = pepper_noise_batch(xs, 0.4, SeededRng(13), segments=(1, 3))
    b = pepper_noise_batch(xs, 0.4, SeededRng(13), segments=(3, 1, 1))
    for q_a, q_b in zip(a, b):
        assert_array_equal(q_a, q_b)


def test_pepper_single_image_keeps_label():
    q = quarter_split(np.ones((28, 28)), label=5)
    noisy = pepper_noise(q, 0.5, SeededRng(14))
    assert noisy.label == 5
    assert 0.3 < (noisy.quarters[0] == 0.0).mean() < 0.7
    assert_array_equal(q.quarters[0], np.ones(QUARTER_DIM))    # untouched


def test_pepper_rate_validation():
    xs = [np.ones((2, QUARTER_DIM))] * 4
    with pytest.raises(ValueError, match="rate"):
        pepper_noise_batch(xs, -0.1, SeededRng(0))
    with pytest.raises(ValueError, match="rate"):
        pepper_noise_batch(xs, 1.5, SeededRng(0))

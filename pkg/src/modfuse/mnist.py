"""MNIST digits as a four-modality problem.

Each 28x28 image is cut into four disjoint 14x14 quarters (top-left,
top-right, bottom-left, bottom-right), and each quarter becomes one
modality of 196 pixels. Reassembling the quarters reproduces the image
exactly, so nothing is lost in the split. Perturbations used by the
robustness grid: occlusion replaces whole quarters with zeros and marks
them absent in the presence mask; pepper noise zeroes individual pixels
of targeted quarters at a given rate (0 is the ink-absent value) and
leaves presence alone.

Files are standard IDX (big-endian dimensions, uint8 payload), read
transparently through gzip when the file is compressed. Pixels are scaled
to [0, 1] on load.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import ModalitySample
from .numerics import SeededRng, bernoulli_mask

__all__ = [
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "QUARTER_NAMES",
    "QUARTER_SIDE",
    "QUARTER_DIM",
    "QuarteredImage",
    "read_idx",
    "write_idx",
    "load_idx",
    "load_mnist",
    "quarter_split",
    "quarter_split_batch",
    "reassemble",
    "reassemble_batch",
    "occlude",
    "occlude_batch",
    "pepper_noise",
    "pepper_noise_batch",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

QUARTER_NAMES = ("top_left", "top_right", "bottom_left", "bottom_right")
QUARTER_SIDE = 14
QUARTER_DIM = QUARTER_SIDE * QUARTER_SIDE
IMAGE_SIDE = 28

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


# --------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    raw = head + rest
    if head == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (uint8 payload) into an array of its declared
    shape. Truncation and bad headers are reported with byte offsets."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise ValueError(f"{path}: file has {len(data)} bytes, header needs 4")
    if data[0] != 0 or data[1] != 0:
        raise ValueError(
            f"{path}: bad magic {data[:4].hex()} at offset 0"
        )
    dtype_code, ndim = data[2], data[3]
    if dtype_code != 0x08:
        raise ValueError(
            f"{path}: unsupported element type 0x{dtype_code:02x} at offset 2"
        )
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise ValueError(
            f"{path}: header needs {header_len} bytes, file has {len(data)}"
        )
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big")
            for i in range(ndim)]
    expected = header_len + int(np.prod(dims, dtype=np.int64))
    if len(data) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes "
            f"({dims} elements after offset {header_len}), got {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8,
                         offset=header_len).reshape(dims).copy()


def write_idx(array, path) -> None:
    """Write a uint8 array as an uncompressed IDX file (read_idx inverse)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if a.ndim > 255:
        raise ValueError("too many dimensions for the IDX header")
    header = bytes([0, 0, 0x08, a.ndim])
    header += b"".join(int(d).to_bytes(4, "big") for d in a.shape)
    with open(path, "wb") as fh:
        fh.write(header + a.tobytes())


def _magic_of(data_shape_ndim: int) -> int:
    return {1: LABEL_MAGIC, 3: IMAGE_MAGIC}.get(data_shape_ndim, 0)


def load_idx(images_path, labels_path):
    """Load an images/labels file pair; returns (images in [0,1] with
    shape (n, 28, 28) float64, labels (n,) int64)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(
            f"{images_path}: expected 3 dimensions (magic "
            f"0x{IMAGE_MAGIC:08x}), got {images.ndim}"
        )
    if labels.ndim != 1:
        raise ValueError(
            f"{labels_path}: expected 1 dimension (magic "
            f"0x{LABEL_MAGIC:08x}), got {labels.ndim}"
        )
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def _find(data_dir, stem) -> str:
    import os
    for name in (stem, stem + ".gz"):
        candidate = os.path.join(data_dir, name)
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found under {data_dir}")


def load_mnist(data_dir):
    """Standard four-file layout; returns ((train_x, train_y),
    (test_x, test_y))."""
    train = load_idx(_find(data_dir, TRAIN_IMAGES),
                     _find(data_dir, TRAIN_LABELS))
    test = load_idx(_find(data_dir, TEST_IMAGES),
                    _find(data_dir, TEST_LABELS))
    return train, test


# --------------------------------------------------------------------------
# quartering


@dataclass
class QuarteredImage:
    """Four 196-pixel modality vectors in QUARTER_NAMES order + label."""

    quarters: list
    label: Optional[int] = None

    def __post_init__(self):
        if len(self.quarters) != 4:
            raise ValueError("expected exactly four quarters")
        self.quarters = [np.asarray(q, dtype=np.float64).reshape(QUARTER_DIM)
                         for q in self.quarters]

    def as_sample(self, presence=None) -> ModalitySample:
        return ModalitySample([q.copy() for q in self.quarters],
                              presence, self.label)


def _as_images(images) -> np.ndarray:
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 2 and a.shape == (IMAGE_SIDE, IMAGE_SIDE):
        a = a[None]
    elif a.ndim == 2 and a.shape[1] == IMAGE_SIDE * IMAGE_SIDE:
        a = a.reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    if a.ndim != 3 or a.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(
            f"expected {IMAGE_SIDE}x{IMAGE_SIDE} images, got {a.shape}"
        )
    return a


def quarter_split_batch(images) -> list:
    """Split images into the four quarter modalities: list of (n, 196)."""
    a = _as_images(images)
    h = QUARTER_SIDE
    blocks = (a[:, :h, :h], a[:, :h, h:], a[:, h:, :h], a[:, h:, h:])
    return [b.reshape(a.shape[0], QUARTER_DIM).copy() for b in blocks]


def quarter_split(image, label: Optional[int] = None) -> QuarteredImage:
    q = quarter_split_batch(image)
    return QuarteredImage([x[0] for x in q], label)


def reassemble_batch(quarters) -> np.ndarray:
    """Inverse of quarter_split_batch: (n, 28, 28)."""
    if len(quarters) != 4:
        raise ValueError("expected exactly four quarters")
    qs = [np.asarray(q, dtype=np.float64).reshape(-1, QUARTER_SIDE,
                                                  QUARTER_SIDE)
          for q in quarters]
    n = qs[0].shape[0]
    out = np.empty((n, IMAGE_SIDE, IMAGE_SIDE))
    h = QUARTER_SIDE
    out[:, :h, :h], out[:, :h, h:] = qs[0], qs[1]
    out[:, h:, :h], out[:, h:, h:] = qs[2], qs[3]
    return out


def reassemble(q) -> np.ndarray:
    quarters = q.quarters if isinstance(q, QuarteredImage) else q
    return reassemble_batch(quarters)[0]


# --------------------------------------------------------------------------
# perturbations


def _check_segments(segments) -> tuple:
    segs = tuple(sorted(set(int(s) for s in segments)))
    for s in segs:
        if not 0 <= s < 4:
            raise ValueError(f"segment index {s} outside 0..3")
    return segs


def occlude_batch(xs, segments):
    """Zero whole quarters and mark them absent.

    Returns (new xs, presence (n, 4)): the occluded quarters carry zero
    vectors and presence 0, so their paths are gated off downstream.
    """
    segs = _check_segments(segments)
    n = xs[0].shape[0]
    new_xs = [x.copy() for x in xs]
    presence = np.ones((n, 4))
    for s in segs:
        new_xs[s] = np.zeros_like(new_xs[s])
        presence[:, s] = 0.0
    return new_xs, presence


def occlude(q: QuarteredImage, segments) -> ModalitySample:
    xs = [x[None] for x in q.quarters]
    new_xs, presence = occlude_batch(xs, segments)
    return ModalitySample([x[0] for x in new_xs], presence[0], q.label)


def pepper_noise_batch(xs, rate: float, rng: SeededRng,
                       segments=None) -> list:
    """Independently zero pixels of the targeted quarters at the given
    rate. Presence is not touched: the channel is corrupted, not absent."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    segs = _check_segments(segments if segments is not None else range(4))
    new_xs = [x.copy() for x in xs]
    for s in segs:
        keep = bernoulli_mask(rng.split(s), new_xs[s].shape, 1.0 - rate)
        new_xs[s] = new_xs[s] * keep
    return new_xs


def pepper_noise(q: QuarteredImage, rate: float, rng: SeededRng,
                 segments=None) -> QuarteredImage:
    xs = [x[None] for x in q.quarters]
    new_xs = pepper_noise_batch(xs, rate, rng, segments)
    return QuarteredImage([x[0] for x in new_xs], q.label)

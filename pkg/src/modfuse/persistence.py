"""Model and matrix files: ASCII header + raw float64 payload.

A file starts with a line naming the format and version, followed by
"key value" header lines, the sentinel "END HEADER", and then the binary
payload: every matrix and bias vector as little-endian float64 in the
order the header declares shapes. Because shapes are fully determined by
the header, the payload needs no per-array framing, and the whole file
round-trips bit-exactly: save, load, save produces identical bytes.

Model kinds: "fusion" (the K-path fusion network with its shared stack)
and "path" (one pretrained modality path with its softmax head). The
header also carries the evaluation-time keep probabilities so a loaded
model is scaled the same way it was trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import (
    FusionParams,
    HeadParams,
    NetworkTopology,
    PathParams,
    PretrainedPath,
    SharedParams,
    check_params,
)

__all__ = [
    "MODEL_VERSION",
    "LoadedModel",
    "save_model",
    "load_model",
    "save_matrix",
    "load_matrix",
]

MODEL_VERSION = 1
_MODEL_MAGIC = "MODFUSE MODEL"
_MATRIX_MAGIC = "MODFUSE MATRIX"
_END = b"END HEADER\n"


@dataclass
class LoadedModel:
    kind: str                      # "fusion" or "path"
    params: object                 # FusionParams or PretrainedPath
    topology: Optional[NetworkTopology]
    input_keep: float
    hidden_keep: float
    modality: Optional[int] = None     # which path a "path" model trained


# --------------------------------------------------------------------------
# low-level framing


def _write_file(path, header_lines, arrays) -> None:
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays
    )
    with open(path, "wb") as fh:
        fh.write("".join(line + "\n" for line in header_lines).encode("ascii"))
        fh.write(_END)
        fh.write(payload)


def _read_file(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(_END)
    if end < 0:
        raise ValueError(f"{path}: missing END HEADER sentinel")
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path}: header is not ASCII: {exc}") from None
    if not lines:
        raise ValueError(f"{path}: empty header")
    first = lines[0].rsplit(" ", 1)
    if len(first) != 2 or first[0] != magic:
        raise ValueError(
            f"{path}: first line {lines[0]!r} does not name a {magic} file"
        )
    try:
        version = int(first[1])
    except ValueError:
        raise ValueError(f"{path}: version field {first[1]!r} is not an "
                         f"integer") from None
    if version != MODEL_VERSION:
        raise ValueError(
            f"{path}: unsupported version {version}, expected {MODEL_VERSION}"
        )
    return lines[1:], data[end + len(_END):]


def _take_arrays(payload, shapes, path):
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != need:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"declared shapes need {need}"
        )
    out = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=offset).reshape(shape)
        out.append(arr.astype(np.float64))
        offset += count * 8
    return out


class _Fields:
    """Ordered 'key value' header lines with error messages naming keys."""

    def __init__(self, lines, path):
        self.path = path
        self.pairs = []
        for line in lines:
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            self.pairs.append((key, rest))
        self.pos = 0

    def next(self, key):
        if self.pos >= len(self.pairs):
            raise ValueError(f"{self.path}: header field '{key}' missing")
        got, rest = self.pairs[self.pos]
        if got != key:
            raise ValueError(
                f"{self.path}: expected header field '{key}', found '{got}'"
            )
        self.pos += 1
        return rest

    def next_int(self, key) -> int:
        raw = self.next(key)
        try:
            return int(raw)
        except ValueError:
            raise ValueError(
                f"{self.path}: header field '{key}' is not an integer: "
                f"{raw!r}"
            ) from None

    def next_float(self, key) -> float:
        raw = self.next(key)
        try:
            return float(raw)
        except ValueError:
            raise ValueError(
                f"{self.path}: header field '{key}' is not a number: {raw!r}"
            ) from None

    def done(self):
        if self.pos != len(self.pairs):
            key = self.pairs[self.pos][0]
            raise ValueError(
                f"{self.path}: unexpected trailing header field '{key}'"
            )


# --------------------------------------------------------------------------
# models


def _path_shapes(in_dim, hidden, n_classes):
    dims = (in_dim,) + tuple(hidden)
    shapes = []
    for i in range(len(hidden)):
        shapes.append((dims[i], dims[i + 1]))
        shapes.append((dims[i + 1],))
    shapes.append((dims[-1], n_classes))
    shapes.append((n_classes,))
    return shapes


def save_model(params, path, topology: Optional[NetworkTopology] = None,
               input_keep: float = 1.0, hidden_keep: float = 1.0,
               modality: Optional[int] = None) -> None:
    """Write a fusion network (needs its topology) or a pretrained path."""
    if isinstance(params, FusionParams):
        if topology is None:
            raise ValueError("fusion models need their topology to save")
        check_params(params, topology)
        lines = [
            f"{_MODEL_MAGIC} {MODEL_VERSION}",
            "kind fusion",
            f"activation {topology.shared_activation}",
            f"gamma {params.shared.gamma!r}",
            f"input_keep {float(input_keep)!r}",
            f"hidden_keep {float(hidden_keep)!r}",
            f"n_classes {topology.n_classes}",
            f"modalities {topology.n_modalities}",
        ]
        arrays = []
        for k, p in enumerate(params.paths):
            dims = " ".join(
                str(d) for d in
                (topology.modality_dims[k],) + tuple(topology.path_hidden[k])
            )
            lines.append(f"path {k} dims {dims}")
            for w, b in zip(p.weights, p.biases):
                arrays.extend([w, b])
        sh = params.shared
        arrays.extend([sh.w1, sh.b1, sh.w2, sh.b2])
        _write_file(path, lines, arrays)
    elif isinstance(params, PretrainedPath):
        in_dim = params.path.weights[0].shape[0]
        hidden = tuple(b.shape[0] for b in params.path.biases)
        n_classes = params.head.bias.shape[0]
        lines = [
            f"{_MODEL_MAGIC} {MODEL_VERSION}",
            "kind path",
            f"input_keep {float(input_keep)!r}",
            f"hidden_keep {float(hidden_keep)!r}",
            f"n_classes {n_classes}",
            f"modality {-1 if modality is None else int(modality)}",
            "path dims " + " ".join(str(d) for d in (in_dim,) + hidden),
        ]
        arrays = []
        for w, b in zip(params.path.weights, params.path.biases):
            arrays.extend([w, b])
        arrays.extend([params.head.weight, params.head.bias])
        _write_file(path, lines, arrays)
    else:
        raise TypeError(f"cannot save a {type(params).__name__}")


def load_model(path) -> LoadedModel:
    lines, payload = _read_file(path, _MODEL_MAGIC)
    fields = _Fields(lines, path)
    kind = fields.next("kind")
    if kind == "fusion":
        activation = fields.next("activation")
        gamma = fields.next_float("gamma")
        input_keep = fields.next_float("input_keep")
        hidden_keep = fields.next_float("hidden_keep")
        n_classes = fields.next_int("n_classes")
        n_modalities = fields.next_int("modalities")
        modality_dims = []
        path_hidden = []
        shapes = []
        for k in range(n_modalities):
            raw = fields.next("path")
            parts = raw.split()
            if len(parts) < 4 or parts[0] != str(k) or parts[1] != "dims":
                raise ValueError(
                    f"{path}: header field 'path' malformed for path {k}: "
                    f"{raw!r}"
                )
            dims = [int(d) for d in parts[2:]]
            modality_dims.append(dims[0])
            path_hidden.append(tuple(dims[1:]))
            for i in range(len(dims) - 1):
                shapes.append((dims[i], dims[i + 1]))
                shapes.append((dims[i + 1],))
        fields.done()
        topology = NetworkTopology(tuple(modality_dims), tuple(path_hidden),
                                   n_classes, activation)
        shapes.append((topology.fused_dim, topology.shared_hidden))
        shapes.append((topology.shared_hidden,))
        shapes.append((topology.shared_hidden, n_classes))
        shapes.append((n_classes,))
        arrays = _take_arrays(payload, shapes, path)
        paths = []
        pos = 0
        for k in range(n_modalities):
            n_layers = len(path_hidden[k])
            weights = [arrays[pos + 2 * i] for i in range(n_layers)]
            biases = [arrays[pos + 2 * i + 1] for i in range(n_layers)]
            paths.append(PathParams(weights, biases))
            pos += 2 * n_layers
        shared = SharedParams(arrays[pos], arrays[pos + 1], arrays[pos + 2],
                              arrays[pos + 3], gamma)
        params = FusionParams(paths, shared)
        check_params(params, topology)
        return LoadedModel("fusion", params, topology, input_keep,
                           hidden_keep)
    if kind == "path":
        input_keep = fields.next_float("input_keep")
        hidden_keep = fields.next_float("hidden_keep")
        n_classes = fields.next_int("n_classes")
        modality = fields.next_int("modality")
        raw = fields.next("path")
        parts = raw.split()
        if len(parts) < 3 or parts[0] != "dims":
            raise ValueError(
                f"{path}: header field 'path' malformed: {raw!r}"
            )
        dims = [int(d) for d in parts[1:]]
        fields.done()
        shapes = _path_shapes(dims[0], dims[1:], n_classes)
        arrays = _take_arrays(payload, shapes, path)
        n_layers = len(dims) - 1
        weights = [arrays[2 * i] for i in range(n_layers)]
        biases = [arrays[2 * i + 1] for i in range(n_layers)]
        pre = PretrainedPath(PathParams(weights, biases),
                             HeadParams(arrays[-2], arrays[-1]))
        return LoadedModel("path", pre, None, input_keep, hidden_keep,
                           modality=None if modality < 0 else modality)
    raise ValueError(f"{path}: unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# bare matrices (descriptor dumps and similar)


def save_matrix(array, path) -> None:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    lines = [
        f"{_MATRIX_MAGIC} {MODEL_VERSION}",
        f"rows {a.shape[0]}",
        f"cols {a.shape[1]}",
    ]
    _write_file(path, lines, [a])


def load_matrix(path) -> np.ndarray:
    lines, payload = _read_file(path, _MATRIX_MAGIC)
    fields = _Fields(lines, path)
    rows = fields.next_int("rows")
    cols = fields.next_int("cols")
    fields.done()
    return _take_arrays(payload, [(rows, cols)], path)[0]

"""Tree-structured multi-modal network.

K modality-specific fully-connected paths (tanh hidden layers) feed a shared
stack of two layers. The first shared weight matrix W1 is partitioned into
K x K blocks: diagonal blocks carry within-modality mappings, off-diagonal
blocks carry cross-modality terms and are scaled by a gate gamma in {0, 1}.
The shared hidden layer has exactly K*N units (N = class count); the second
shared matrix W2 is partitioned into K blocks of shape N x N. With W1's
diagonal blocks transplanted from pretrained per-modality softmax heads,
off-diagonal blocks zeroed, and W2 blocks set to (1/K)*I, the freshly
initialized network reproduces normalized geometric-mean fusion of the
per-modality posteriors (exactly so under the "linear" shared activation,
argmax-equivalently under "tanh").

A modality can be absent for a given sample (sensor failure, occlusion, or a
training-time drop). Absence is explicit: the presence/delta gate multiplies
the path's output at the fusion input, so an absent modality contributes
exactly zero activation downstream and the forward pass equals the forward
pass of the reduced network without that path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import (
    SeededRng,
    apply_softmax_rows,
    apply_tanh,
    as_matrix,
    matmul,
)

__all__ = [
    "NetworkTopology",
    "PathParams",
    "HeadParams",
    "PretrainedPath",
    "SharedParams",
    "FusionParams",
    "ModalitySample",
    "ModalityBatch",
    "ForwardMasks",
    "ForwardTrace",
    "forward",
    "forward_batch",
    "forward_single_modality",
    "single_modality_posteriors",
    "init_shared_from_pretrained",
    "set_gamma",
    "geometric_mean_fusion",
    "random_path",
    "random_head",
    "random_shared",
    "gate_mask",
    "parameter_count",
]


# --------------------------------------------------------------------------
# topology and parameter containers


@dataclass(frozen=True)
class NetworkTopology:
    """Structural description of a K-path fusion network.

    modality_dims: input dimension per path.
    path_hidden: per-path tanh hidden layer sizes; the last entry is the
        path output width F_k feeding the shared stack.
    n_classes: N, the softmax output width.
    shared_activation: "tanh" (default) or "linear". The linear variant
        exists because the geometric-mean equivalence of the initialized
        shared stack is exact only without the squashing nonlinearity.
    """

    modality_dims: tuple
    path_hidden: tuple
    n_classes: int
    shared_activation: str = "tanh"

    def __post_init__(self):
        if len(self.modality_dims) != len(self.path_hidden):
            raise ValueError("modality_dims and path_hidden length mismatch")
        if len(self.modality_dims) < 1:
            raise ValueError("need at least one modality path")
        for dims in self.path_hidden:
            if len(dims) < 1:
                raise ValueError("each path needs at least one hidden layer")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.shared_activation not in ("tanh", "linear"):
            raise ValueError(
                f"unknown shared activation {self.shared_activation!r}"
            )

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)

    @property
    def path_out_dims(self) -> tuple:
        return tuple(dims[-1] for dims in self.path_hidden)

    @property
    def fused_dim(self) -> int:
        # F = sum_k F_k, the row count of W1
        return sum(self.path_out_dims)

    @property
    def shared_hidden(self) -> int:
        # fixed by construction: K*N shared hidden units
        return self.n_modalities * self.n_classes

    def row_offsets(self) -> np.ndarray:
        """Start offset of each path's block of W1 rows (length K+1)."""
        return np.concatenate([[0], np.cumsum(self.path_out_dims)])


@dataclass
class PathParams:
    """Weights and biases of one modality path, input to path output."""

    weights: list
    biases: list

    def copy(self) -> "PathParams":
        return PathParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


@dataclass
class HeadParams:
    """Per-modality softmax head used during pretraining (F_k x N)."""

    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "HeadParams":
        return HeadParams(self.weight.copy(), self.bias.copy())


@dataclass
class PretrainedPath:
    path: PathParams
    head: HeadParams

    def copy(self) -> "PretrainedPath":
        return PretrainedPath(self.path.copy(), self.head.copy())


@dataclass
class SharedParams:
    """Block-structured shared stack: W1 (F x K*N), W2 (K*N x N), gate."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gamma: float

    def copy(self) -> "SharedParams":
        return SharedParams(self.w1.copy(), self.b1.copy(),
                            self.w2.copy(), self.b2.copy(), self.gamma)


@dataclass
class FusionParams:
    paths: list
    shared: SharedParams

    def copy(self) -> "FusionParams":
        return FusionParams([p.copy() for p in self.paths],
                            self.shared.copy())


@dataclass
class ModalitySample:
    """One sample: per-modality vectors x^(k), presence mask, optional label.

    presence[k] = 0 marks modality k as absent; its vector is then treated
    as all-zero and its path contributes nothing downstream. Presence is
    metadata set by the caller (a drop draw, an occlusion plan), never
    inferred from the vector contents: an all-zero but present vector is a
    legitimate input.
    """

    xs: list
    presence: np.ndarray = None
    y: Optional[int] = None

    def __post_init__(self):
        if self.presence is None:
            self.presence = np.ones(len(self.xs), dtype=np.float64)
        self.presence = np.asarray(self.presence, dtype=np.float64)
        if self.presence.shape != (len(self.xs),):
            raise ValueError("presence mask length must equal modality count")


@dataclass
class ModalityBatch:
    """Batched samples: xs[k] has shape (B, F_k), presence (B, K)."""

    xs: list
    presence: np.ndarray = None
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.xs[0].shape[0]
        if self.presence is None:
            self.presence = np.ones((n, len(self.xs)), dtype=np.float64)

    @property
    def n(self) -> int:
        return self.xs[0].shape[0]


@dataclass
class ForwardMasks:
    """Training-time masks recorded for exact backpropagation.

    delta: (B, K) modality keep draw (1 = keep), combined with the batch's
        presence mask by elementwise product.
    path_hidden: per path, per layer, multiplicative masks on the tanh
        activations; None means no hidden dropout (the default).
    shared_hidden: multiplicative mask on the shared hidden activations.
    """

    delta: Optional[np.ndarray] = None
    path_hidden: Optional[list] = None
    shared_hidden: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    """Everything backward needs: pre-activations, activations, gates.

    Activations are recorded both before and after any hidden-dropout mask:
    the pre-mask value drives the tanh derivative, the post-mask value is
    what the next layer actually consumed.
    """

    topology: "NetworkTopology"
    xs: list
    gate: np.ndarray
    path_zs: list
    path_acts_pre: list
    path_acts_used: list
    path_outs_gated: np.ndarray   # (B, F) concatenated gated path outputs
    z1: np.ndarray
    h_pre: np.ndarray
    h_used: np.ndarray
    z2: np.ndarray
    posterior: np.ndarray
    mode: str
    masks: Optional[ForwardMasks]
    w1_eff: np.ndarray


# --------------------------------------------------------------------------
# structure helpers


def gate_mask(topology: NetworkTopology, gamma: float) -> np.ndarray:
    """F x K*N matrix: 1 on diagonal blocks, gamma on off-diagonal blocks."""
    n = topology.n_classes
    offs = topology.row_offsets()
    mask = np.full((topology.fused_dim, topology.shared_hidden), gamma,
                   dtype=np.float64)
    for k in range(topology.n_modalities):
        mask[offs[k]:offs[k + 1], k * n:(k + 1) * n] = 1.0
    return mask


def check_params(params: FusionParams, topology: NetworkTopology) -> None:
    if len(params.paths) != topology.n_modalities:
        raise ValueError("path count does not match topology")
    for k, path in enumerate(params.paths):
        dims = (topology.modality_dims[k],) + tuple(topology.path_hidden[k])
        for i, (w, b) in enumerate(zip(path.weights, path.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(
                    f"path {k} layer {i} has shape {w.shape}, "
                    f"expected {(dims[i], dims[i + 1])}"
                )
    sh = params.shared
    f, m = topology.fused_dim, topology.shared_hidden
    if sh.w1.shape != (f, m):
        raise ValueError(f"W1 shape {sh.w1.shape}, expected {(f, m)}")
    if sh.w2.shape != (m, topology.n_classes):
        raise ValueError(
            f"W2 shape {sh.w2.shape}, expected {(m, topology.n_classes)}"
        )


def parameter_count(params: FusionParams) -> int:
    total = 0
    for path in params.paths:
        total += sum(w.size for w in path.weights)
        total += sum(b.size for b in path.biases)
    sh = params.shared
    return total + sh.w1.size + sh.b1.size + sh.w2.size + sh.b2.size


# --------------------------------------------------------------------------
# initialization


def _glorot(rng: SeededRng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(size=(fan_in, fan_out)) * 2.0 - 1.0) * limit


def random_path(rng: SeededRng, in_dim: int, hidden: Sequence[int]) -> PathParams:
    dims = (in_dim,) + tuple(hidden)
    weights = [_glorot(rng.split(i), dims[i], dims[i + 1])
               for i in range(len(hidden))]
    biases = [np.zeros(dims[i + 1]) for i in range(len(hidden))]
    return PathParams(weights, biases)


def random_head(rng: SeededRng, f_k: int, n_classes: int) -> HeadParams:
    return HeadParams(_glorot(rng, f_k, n_classes), np.zeros(n_classes))


def random_shared(rng: SeededRng, topology: NetworkTopology,
                  gamma: float = 1.0) -> SharedParams:
    f, m, n = topology.fused_dim, topology.shared_hidden, topology.n_classes
    return SharedParams(
        w1=_glorot(rng.split(0), f, m),
        b1=np.zeros(m),
        w2=_glorot(rng.split(1), m, n),
        b2=np.zeros(n),
        gamma=float(gamma),
    )


def init_shared_from_pretrained(pretrained, topology: NetworkTopology
                                ) -> SharedParams:
    """Shared stack initialized to reproduce geometric-mean fusion.

    W1 diagonal blocks take the pretrained heads' weights, b1 their biases,
    off-diagonal blocks start at zero with the gate closed (gamma=0), and
    each W2 block is (1/K)*I so the output logits are the mean of the
    per-modality log-scores.
    """
    k_count = topology.n_modalities
    n = topology.n_classes
    if len(pretrained) != k_count:
        raise ValueError("need one pretrained head per modality")
    offs = topology.row_offsets()
    w1 = np.zeros((topology.fused_dim, topology.shared_hidden))
    b1 = np.zeros(topology.shared_hidden)
    for k, pre in enumerate(pretrained):
        f_k = topology.path_out_dims[k]
        if pre.head.weight.shape != (f_k, n):
            raise ValueError(
                f"head {k} has shape {pre.head.weight.shape}, "
                f"expected {(f_k, n)}"
            )
        w1[offs[k]:offs[k + 1], k * n:(k + 1) * n] = pre.head.weight
        b1[k * n:(k + 1) * n] = pre.head.bias
    w2 = np.zeros((topology.shared_hidden, n))
    for k in range(k_count):
        w2[k * n:(k + 1) * n, :] = np.eye(n) / k_count
    return SharedParams(w1=w1, b1=b1, w2=w2, b2=np.zeros(n), gamma=0.0)


def set_gamma(params: FusionParams, value: float) -> FusionParams:
    """Open (1) or close (0) the cross-modality gate. Weights untouched."""
    if value not in (0, 1, 0.0, 1.0):
        raise ValueError(f"gamma must be 0 or 1, got {value}")
    params.shared.gamma = float(value)
    return params


# --------------------------------------------------------------------------
# forward passes


def _check_batch(batch: ModalityBatch, topology: NetworkTopology) -> None:
    if len(batch.xs) != topology.n_modalities:
        raise ValueError(
            f"sample has {len(batch.xs)} modalities, "
            f"topology expects {topology.n_modalities}"
        )
    for k, x in enumerate(batch.xs):
        if x.shape[1] != topology.modality_dims[k]:
            raise ValueError(
                f"modality {k} has width {x.shape[1]}, "
                f"expected {topology.modality_dims[k]}"
            )


def forward_batch(batch: ModalityBatch, params: FusionParams,
                  topology: NetworkTopology, mode: str = "eval",
                  masks: Optional[ForwardMasks] = None,
                  hidden_keep: float = 1.0):
    """Batched forward pass. Returns (posteriors (B, N), ForwardTrace).

    mode "train" applies the supplied masks; mode "eval" ignores them and,
    when hidden dropout was used in training, scales hidden activations by
    ``hidden_keep`` (input scaling happens at the caller, on the inputs).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
    _check_batch(batch, topology)
    b_size = batch.n

    gate = np.asarray(batch.presence, dtype=np.float64)
    if mode == "train" and masks is not None and masks.delta is not None:
        gate = gate * masks.delta

    path_zs, path_acts_pre, path_acts_used, path_outs = [], [], [], []
    for k, path in enumerate(params.paths):
        a = batch.xs[k]
        zs, acts_pre, acts_used = [], [], []
        for i, (w, b) in enumerate(zip(path.weights, path.biases)):
            z = matmul(a, w) + b
            a_pre = apply_tanh(z)
            a = a_pre
            if mode == "train" and masks is not None \
                    and masks.path_hidden is not None:
                a = a * masks.path_hidden[k][i]
            elif mode == "eval" and hidden_keep != 1.0:
                a = a * hidden_keep
            zs.append(z)
            acts_pre.append(a_pre)
            acts_used.append(a)
        path_zs.append(zs)
        path_acts_pre.append(acts_pre)
        path_acts_used.append(acts_used)
        path_outs.append(a)

    # absent modalities contribute exactly zero to the shared stack
    gated = [f * gate[:, k:k + 1] for k, f in enumerate(path_outs)]
    fcat = np.concatenate(gated, axis=1)

    w1_eff = params.shared.w1 * gate_mask(topology, params.shared.gamma)
    z1 = matmul(fcat, w1_eff) + params.shared.b1
    if topology.shared_activation == "tanh":
        h_pre = apply_tanh(z1)
    else:
        h_pre = z1
    h = h_pre
    if mode == "train" and masks is not None \
            and masks.shared_hidden is not None:
        h = h * masks.shared_hidden
    elif mode == "eval" and hidden_keep != 1.0:
        h = h * hidden_keep

    z2 = matmul(h, params.shared.w2) + params.shared.b2
    posterior = apply_softmax_rows(z2)

    trace = ForwardTrace(
        topology=topology, xs=batch.xs, gate=gate, path_zs=path_zs,
        path_acts_pre=path_acts_pre, path_acts_used=path_acts_used,
        path_outs_gated=fcat, z1=z1, h_pre=h_pre, h_used=h,
        z2=z2, posterior=posterior, mode=mode, masks=masks, w1_eff=w1_eff,
    )
    return posterior, trace


def forward(sample: ModalitySample, params: FusionParams,
            topology: NetworkTopology, mode: str = "eval",
            masks: Optional[ForwardMasks] = None,
            hidden_keep: float = 1.0):
    """Single-sample forward pass; see forward_batch."""
    batch = ModalityBatch(
        xs=[np.asarray(x, dtype=np.float64)[None, :] for x in sample.xs],
        presence=sample.presence[None, :],
    )
    posterior, trace = forward_batch(batch, params, topology, mode=mode,
                                     masks=masks, hidden_keep=hidden_keep)
    return posterior[0], trace


def _path_forward(x: np.ndarray, path: PathParams) -> np.ndarray:
    a = x
    for w, b in zip(path.weights, path.biases):
        a = apply_tanh(matmul(a, w) + b)
    return a


def forward_single_modality(k: int, sample: ModalitySample, pretrained,
                            topology: NetworkTopology) -> np.ndarray:
    """Posterior of modality k's path through its own pretraining head.

    Depends only on x^(k); other modalities are not wired in.
    """
    if not 0 <= k < topology.n_modalities:
        raise ValueError(f"no modality path {k}")
    pre = pretrained[k]
    x = np.asarray(sample.xs[k], dtype=np.float64)[None, :]
    if x.shape[1] != topology.modality_dims[k]:
        raise ValueError(
            f"modality {k} has width {x.shape[1]}, "
            f"expected {topology.modality_dims[k]}"
        )
    f = _path_forward(x, pre.path)
    logits = matmul(f, pre.head.weight) + pre.head.bias
    return apply_softmax_rows(logits)[0]


def single_modality_posteriors(xs: list, pretrained, topology: NetworkTopology
                               ) -> list:
    """Batched per-modality posteriors for all K paths (eval use)."""
    out = []
    for k in range(topology.n_modalities):
        f = _path_forward(np.asarray(xs[k], dtype=np.float64),
                          pretrained[k].path)
        logits = matmul(f, pretrained[k].head.weight) + pretrained[k].head.bias
        out.append(apply_softmax_rows(logits))
    return out


# --------------------------------------------------------------------------
# fusion oracle


def geometric_mean_fusion(posteriors) -> np.ndarray:
    """Normalized geometric mean of K class posteriors.

    output_j is proportional to (prod_k p_j^(k))^(1/K), i.e. the softmax of
    the mean per-modality log-score. The K-th root makes fusion idempotent:
    K identical posteriors fuse to themselves. Inputs are clamped at 1e-300
    before the log so zero probabilities cannot produce -inf.
    """
    p = as_matrix(np.stack([np.asarray(q, dtype=np.float64)
                            for q in posteriors]), "posteriors")
    if (p < -1e-12).any():
        raise ValueError("posteriors must be non-negative")
    sums = p.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-8):
        raise ValueError("each posterior must sum to 1")
    logp = np.log(np.maximum(p, 1e-300))
    s = logp.mean(axis=0)
    e = np.exp(s - s.max())
    return e / e.sum()

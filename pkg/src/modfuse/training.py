"""Staged optimization for the fusion network.

Stages run in a fixed order: per-modality pretraining (each path with its own
softmax head), then fusion training with the cross-modality gate closed
(gamma=0), then gated relaxation (gamma=1) during which whole-modality
dropping can be active. Plain SGD with a per-epoch step-decayed learning
rate; no momentum. Early stopping per stage keeps the best-validation
parameters (fewest validation errors, ties broken by validation loss).

Objective: mean cross-entropy over the batch plus an L2 penalty on weight
matrices (biases unpenalized). The penalty covers the weights that are active
for a given sample: a dropped modality's path weights and its block of W1
rows drop out of both the error term and the penalty, so the per-sample
gradient equals the gradient of the reduced network without that path,
elementwise. Off-diagonal W1 blocks are likewise outside the objective while
the gate is closed, which is what freezes them.

Dropout conventions: input dropout zeroes raw inputs at train time and scales
inputs by the keep probability at eval time (expectation preserving, no train
scaling). Whole-modality drops are sampled per sample, recorded in the
presence mask, and never rescaled at eval.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import SeededRng, apply_softmax_rows, bernoulli_mask
from .network import (
    ForwardMasks,
    ForwardTrace,
    FusionParams,
    HeadParams,
    ModalityBatch,
    ModalitySample,
    NetworkTopology,
    PathParams,
    PretrainedPath,
    SharedParams,
    forward_batch,
    gate_mask,
    init_shared_from_pretrained,
    random_head,
    random_path,
    set_gamma,
)

__all__ = [
    "TrainingConfig",
    "StageKind",
    "StageSpec",
    "StagePlan",
    "ModalityDataset",
    "LogEntry",
    "StageRecord",
    "TrainingRun",
    "cross_entropy_loss",
    "backward",
    "backward_batch",
    "sgd_step",
    "apply_input_dropout",
    "input_dropout_batch",
    "apply_moddrop",
    "moddrop_batch",
    "batch_objective",
    "pretrain_modality",
    "fuse_train",
    "evaluate_fused",
    "evaluate_path",
    "predict_fused",
    "format_log",
]


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.1
    lr_decay: float = 0.95
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 15
    l2_alpha: float = 1e-4
    input_keep: float = 1.0       # keep probability for input dropout
    moddrop_keep: Optional[object] = None  # scalar or per-modality keeps
    hidden_keep: float = 1.0      # hidden-unit dropout, off by default
    seed: int = 0

    def __post_init__(self):
        for name in ("input_keep", "hidden_keep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.moddrop_keep is not None:
            keeps = np.atleast_1d(np.asarray(self.moddrop_keep, dtype=float))
            if ((keeps < 0) | (keeps > 1)).any():
                raise ValueError("moddrop keep probabilities must be in [0, 1]")
        if self.l2_alpha < 0:
            raise ValueError("l2_alpha must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and max_epochs must be positive")

    def moddrop_keeps(self, n_modalities: int) -> Optional[np.ndarray]:
        if self.moddrop_keep is None:
            return None
        keeps = np.atleast_1d(np.asarray(self.moddrop_keep, dtype=np.float64))
        if keeps.size == 1:
            keeps = np.repeat(keeps, n_modalities)
        if keeps.size != n_modalities:
            raise ValueError(
                f"got {keeps.size} moddrop keeps for {n_modalities} modalities"
            )
        return keeps


class StageKind(enum.IntEnum):
    PRETRAIN = 0
    FUSE_FROZEN = 1
    FUSE_RELAXED = 2


@dataclass(frozen=True)
class StageSpec:
    kind: StageKind
    max_epochs: Optional[int] = None
    moddrop: bool = False


@dataclass(frozen=True)
class StagePlan:
    """Ordered training stages. Construction validates the ordering."""

    stages: tuple

    def __post_init__(self):
        if not self.stages:
            raise ValueError("stage plan is empty")
        kinds = [s.kind for s in self.stages]
        for a, b in zip(kinds, kinds[1:]):
            if b <= a:
                raise ValueError(
                    f"stages out of order: {a.name} before {b.name}"
                )
        for s in self.stages:
            if s.moddrop and s.kind != StageKind.FUSE_RELAXED:
                raise ValueError(
                    "modality dropping is only active in the relaxed stage"
                )

    @staticmethod
    def standard(moddrop: bool = False, frozen_epochs: Optional[int] = None,
                 relaxed_epochs: Optional[int] = None) -> "StagePlan":
        return StagePlan((
            StageSpec(StageKind.PRETRAIN),
            StageSpec(StageKind.FUSE_FROZEN, max_epochs=frozen_epochs),
            StageSpec(StageKind.FUSE_RELAXED, max_epochs=relaxed_epochs,
                      moddrop=moddrop),
        ))

    @staticmethod
    def relaxed_only(moddrop: bool = False,
                     max_epochs: Optional[int] = None) -> "StagePlan":
        return StagePlan((
            StageSpec(StageKind.FUSE_RELAXED, max_epochs=max_epochs,
                      moddrop=moddrop),
        ))


@dataclass
class ModalityDataset:
    """Training and validation splits as full (unbatched) modality arrays."""

    train: ModalityBatch
    val: ModalityBatch

    def __post_init__(self):
        if self.train.n == 0 or self.val.n == 0:
            raise ValueError("dataset must have non-empty train and val splits")


@dataclass
class LogEntry:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    val_errors: int


@dataclass
class StageRecord:
    stage: str
    init_val_loss: float
    init_val_errors: int
    best_val_loss: float
    best_val_errors: int
    epochs_run: int


@dataclass
class TrainingRun:
    params: object           # FusionParams or PretrainedPath
    log: list
    stages: list


def format_log(entries) -> str:
    lines = ["epoch\tstage\ttrain_loss\tval_loss\tval_errors"]
    for e in entries:
        lines.append(
            f"{e.epoch}\t{e.stage}\t{e.train_loss:.6f}"
            f"\t{e.val_loss:.6f}\t{e.val_errors}"
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# loss and gradients


def cross_entropy_loss(posterior, label: int) -> float:
    """-log p_label with the probability clamped at 1e-300."""
    p = np.asarray(posterior, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("posterior must be a vector")
    if not 0 <= int(label) < p.shape[0]:
        raise ValueError(
            f"label {label} out of range for {p.shape[0]} classes"
        )
    return float(-np.log(max(p[int(label)], 1e-300)))


def _batch_ce(posterior: np.ndarray, labels: np.ndarray) -> float:
    picked = posterior[np.arange(posterior.shape[0]), labels]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def _l2_value(params: FusionParams, topology: NetworkTopology,
              gate_mean: np.ndarray, l2_alpha: float) -> float:
    """Penalty value matching the per-sample active-weight convention.

    gate_mean[k] is the batch-mean of modality k's gate; a path that was
    dropped for part of the batch is penalized in proportion.
    """
    if l2_alpha == 0.0:
        return 0.0
    total = 0.0
    for k, path in enumerate(params.paths):
        total += gate_mean[k] * sum(float((w**2).sum()) for w in path.weights)
    g = gate_mask(topology, params.shared.gamma)
    rowgate = np.repeat(gate_mean, topology.path_out_dims)
    total += float(((params.shared.w1**2) * g * rowgate[:, None]).sum())
    total += float((params.shared.w2**2).sum())
    return l2_alpha * total


def backward_batch(trace: ForwardTrace, labels, params: FusionParams,
                   config: TrainingConfig) -> FusionParams:
    """Exact gradients of the batch objective. Returns a FusionParams-shaped
    container holding gradient arrays."""
    topology = trace.topology
    posterior = trace.posterior
    b_size, n = posterior.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b_size,):
        raise ValueError("labels do not match the traced batch")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"labels out of range for {n} classes")
    if params.shared.w2.shape[1] != n:
        raise ValueError("trace and params disagree on class count")

    sh = params.shared
    alpha = config.l2_alpha
    masks = trace.masks
    gate_mean = trace.gate.mean(axis=0)

    onehot = np.zeros_like(posterior)
    onehot[np.arange(b_size), labels] = 1.0
    dz2 = (posterior - onehot) / b_size

    g_w2 = trace.h_used.T @ dz2 + 2.0 * alpha * sh.w2
    g_b2 = dz2.sum(axis=0)

    dh = dz2 @ sh.w2.T
    if masks is not None and masks.shared_hidden is not None:
        dh = dh * masks.shared_hidden
    if topology.shared_activation == "tanh":
        dz1 = dh * (1.0 - trace.h_pre**2)
    else:
        dz1 = dh

    g_mask = gate_mask(topology, sh.gamma)
    rowgate = np.repeat(gate_mean, topology.path_out_dims)
    g_w1 = (trace.path_outs_gated.T @ dz1) * g_mask
    g_w1 += 2.0 * alpha * sh.w1 * g_mask * rowgate[:, None]
    g_b1 = dz1.sum(axis=0)

    dfcat = dz1 @ trace.w1_eff.T
    offs = topology.row_offsets()

    path_grads = []
    for k, path in enumerate(params.paths):
        d_a = dfcat[:, offs[k]:offs[k + 1]] * trace.gate[:, k:k + 1]
        n_layers = len(path.weights)
        gws = [None] * n_layers
        gbs = [None] * n_layers
        for layer in reversed(range(n_layers)):
            if masks is not None and masks.path_hidden is not None:
                d_a = d_a * masks.path_hidden[k][layer]
            dz = d_a * (1.0 - trace.path_acts_pre[k][layer]**2)
            prev = trace.xs[k] if layer == 0 \
                else trace.path_acts_used[k][layer - 1]
            gws[layer] = prev.T @ dz \
                + 2.0 * alpha * gate_mean[k] * path.weights[layer]
            gbs[layer] = dz.sum(axis=0)
            if layer > 0:
                d_a = dz @ path.weights[layer].T
        path_grads.append(PathParams(gws, gbs))

    shared_grads = SharedParams(g_w1, g_b1, g_w2, g_b2, gamma=sh.gamma)
    return FusionParams(path_grads, shared_grads)


def backward(trace: ForwardTrace, label: int, params: FusionParams,
             config: TrainingConfig) -> FusionParams:
    """Single-sample gradients (the trace must come from a one-sample
    forward pass in train mode)."""
    if trace.posterior.shape[0] != 1:
        raise ValueError("single-sample backward needs a one-sample trace")
    return backward_batch(trace, np.asarray([label]), params, config)


def batch_objective(params: FusionParams, topology: NetworkTopology,
                    batch: ModalityBatch, labels, config: TrainingConfig,
                    masks: Optional[ForwardMasks] = None) -> float:
    """The exact scalar the gradients differentiate: batch-mean
    cross-entropy plus the active-weight L2 penalty. Used by the
    finite-difference checks."""
    posterior, trace = forward_batch(batch, params, topology, mode="train",
                                     masks=masks)
    ce = _batch_ce(posterior, np.asarray(labels, dtype=np.int64))
    return ce + _l2_value(params, topology, trace.gate.mean(axis=0),
                          config.l2_alpha)


# --------------------------------------------------------------------------
# parameter updates


def _arrays(obj):
    if isinstance(obj, FusionParams):
        for path in obj.paths:
            yield from path.weights
            yield from path.biases
        yield obj.shared.w1
        yield obj.shared.b1
        yield obj.shared.w2
        yield obj.shared.b2
    elif isinstance(obj, PretrainedPath):
        yield from obj.path.weights
        yield from obj.path.biases
        yield obj.head.weight
        yield obj.head.bias
    elif isinstance(obj, PathParams):
        yield from obj.weights
        yield from obj.biases
    elif isinstance(obj, HeadParams):
        yield obj.weight
        yield obj.bias
    elif isinstance(obj, SharedParams):
        yield obj.w1
        yield obj.b1
        yield obj.w2
        yield obj.b2
    else:
        raise TypeError(f"no parameter arrays in {type(obj).__name__}")


def sgd_step(params, gradients, learning_rate: float):
    """w <- w - lr * g, applied uniformly over the parameter structure."""
    for p, g in zip(_arrays(params), _arrays(gradients), strict=True):
        if p.shape != g.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {p.shape}"
            )
        p -= learning_rate * g
    return params


# --------------------------------------------------------------------------
# input and modality dropout


def input_dropout_batch(xs, p_keep: float, rng: SeededRng) -> list:
    """Zero each scalar input independently with probability 1 - p_keep."""
    if not 0.0 <= p_keep <= 1.0:
        raise ValueError(f"keep probability must be in [0, 1], got {p_keep}")
    if p_keep == 1.0:
        return [x.copy() for x in xs]
    return [x * bernoulli_mask(rng.split(k), x.shape, p_keep)
            for k, x in enumerate(xs)]


def apply_input_dropout(sample: ModalitySample, p_keep: float,
                        rng: Optional[SeededRng] = None,
                        mode: str = "train") -> ModalitySample:
    """Masked copy of the sample (train) or keep-probability scaling (eval)."""
    if not 0.0 <= p_keep <= 1.0:
        raise ValueError(f"keep probability must be in [0, 1], got {p_keep}")
    xs = [np.asarray(x, dtype=np.float64) for x in sample.xs]
    if mode == "eval":
        new_xs = [x * p_keep for x in xs]
    elif mode == "train":
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        new_xs = input_dropout_batch(xs, p_keep, rng)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
    return ModalitySample(new_xs, sample.presence.copy(), sample.y)


def moddrop_batch(xs, presence, keeps, rng: SeededRng):
    """Per-sample whole-modality drops.

    Returns (new xs, new presence, delta) where delta[i, k] = 0 marks
    modality k dropped for sample i; dropped vectors are zeroed and the
    presence mask absorbs the draw.
    """
    keeps = np.asarray(keeps, dtype=np.float64)
    n = xs[0].shape[0]
    delta = np.empty((n, len(xs)), dtype=np.float64)
    for k in range(len(xs)):
        delta[:, k] = bernoulli_mask(rng.split(k), n, float(keeps[k]))
    new_xs = [x * delta[:, k:k + 1] for k, x in enumerate(xs)]
    return new_xs, presence * delta, delta


def apply_moddrop(sample: ModalitySample, keeps, rng: SeededRng):
    """Single-sample modality drop; returns (masked sample, delta mask)."""
    keeps = np.atleast_1d(np.asarray(keeps, dtype=np.float64))
    if keeps.size == 1:
        keeps = np.repeat(keeps, len(sample.xs))
    if ((keeps < 0) | (keeps > 1)).any():
        raise ValueError("keep probabilities must be in [0, 1]")
    xs = [np.asarray(x, dtype=np.float64)[None, :] for x in sample.xs]
    new_xs, new_presence, delta = moddrop_batch(
        xs, sample.presence[None, :], keeps, rng)
    out = ModalitySample([x[0] for x in new_xs], new_presence[0], sample.y)
    return out, delta[0]


# --------------------------------------------------------------------------
# evaluation helpers


def _iter_chunks(n: int, chunk: int):
    for start in range(0, n, chunk):
        yield slice(start, min(n, start + chunk))


def predict_fused(params: FusionParams, topology: NetworkTopology, xs,
                  presence=None, input_keep: float = 1.0,
                  hidden_keep: float = 1.0, chunk: int = 4096) -> np.ndarray:
    """Posteriors for a full array set, chunked to bound memory."""
    n = xs[0].shape[0]
    if presence is None:
        presence = np.ones((n, len(xs)), dtype=np.float64)
    out = np.empty((n, topology.n_classes), dtype=np.float64)
    for sl in _iter_chunks(n, chunk):
        batch = ModalityBatch([x[sl] * input_keep for x in xs],
                              presence[sl])
        post, _ = forward_batch(batch, params, topology, mode="eval",
                                hidden_keep=hidden_keep)
        out[sl] = post
    return out


def evaluate_fused(params: FusionParams, topology: NetworkTopology,
                   batch: ModalityBatch, input_keep: float = 1.0,
                   hidden_keep: float = 1.0, chunk: int = 4096):
    """(mean cross-entropy, error count) on a labeled array set."""
    post = predict_fused(params, topology, batch.xs, batch.presence,
                         input_keep=input_keep, hidden_keep=hidden_keep,
                         chunk=chunk)
    y = np.asarray(batch.y, dtype=np.int64)
    picked = post[np.arange(post.shape[0]), y]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    errors = int((post.argmax(axis=1) != y).sum())
    return loss, errors


def _path_head_forward(pre: PretrainedPath, x: np.ndarray,
                       hidden_keep: float = 1.0):
    a = x
    acts = []
    for w, b in zip(pre.path.weights, pre.path.biases):
        a = np.tanh(a @ w + b)
        if hidden_keep != 1.0:
            a = a * hidden_keep
        acts.append(a)
    logits = a @ pre.head.weight + pre.head.bias
    return apply_softmax_rows(logits), acts


def evaluate_path(k: int, pre: PretrainedPath, batch: ModalityBatch,
                  input_keep: float = 1.0, hidden_keep: float = 1.0,
                  chunk: int = 4096):
    """(mean cross-entropy, error count) of one path through its head."""
    x_all = batch.xs[k]
    y = np.asarray(batch.y, dtype=np.int64)
    n = x_all.shape[0]
    loss_total = 0.0
    errors = 0
    for sl in _iter_chunks(n, chunk):
        post, _ = _path_head_forward(pre, x_all[sl] * input_keep,
                                     hidden_keep=hidden_keep)
        yb = y[sl]
        picked = post[np.arange(post.shape[0]), yb]
        loss_total += float(-np.log(np.maximum(picked, 1e-300)).sum())
        errors += int((post.argmax(axis=1) != yb).sum())
    return loss_total / n, errors


# --------------------------------------------------------------------------
# stage runner (shared by pretraining and fusion)


def _run_stage(params, config: TrainingConfig, stage_name: str,
               stage_rng: SeededRng, max_epochs: int, n_train: int,
               train_step: Callable, evaluate: Callable, log: list):
    """Epoch loop with early stopping on validation errors.

    ``train_step(batch_indices, learning_rate, batch_rng)`` mutates params
    and returns the batch objective; ``evaluate()`` returns
    (val_loss, val_errors) for the current params. Returns
    (best_params, StageRecord)."""
    init_loss, init_errors = evaluate()
    best = params.copy()
    best_loss, best_errors = init_loss, init_errors
    patience_left = config.patience
    epochs_run = 0

    for epoch in range(1, max_epochs + 1):
        lr = config.learning_rate * config.lr_decay ** (epoch - 1)
        perm = stage_rng.split(epoch, 0).permutation(n_train)
        running = 0.0
        n_batches = 0
        for bi, start in enumerate(range(0, n_train, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            running += train_step(idx, lr, stage_rng.split(epoch, 1, bi))
            n_batches += 1
        val_loss, val_errors = evaluate()
        epochs_run = epoch
        log.append(LogEntry(epoch, stage_name, running / max(n_batches, 1),
                            val_loss, val_errors))
        if (val_errors, val_loss) < (best_errors, best_loss):
            best = params.copy()
            best_loss, best_errors = val_loss, val_errors
            patience_left = config.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

    record = StageRecord(stage_name, init_loss, init_errors,
                         best_loss, best_errors, epochs_run)
    return best, record


def _hidden_masks_for_paths(topology: NetworkTopology, b_size: int,
                            keep: float, rng: SeededRng):
    masks = []
    for k, dims in enumerate(topology.path_hidden):
        masks.append([bernoulli_mask(rng.split(k, i), (b_size, d), keep)
                      for i, d in enumerate(dims)])
    return masks


# --------------------------------------------------------------------------
# pretraining


def pretrain_modality(k: int, dataset: ModalityDataset,
                      topology: NetworkTopology,
                      config: TrainingConfig) -> TrainingRun:
    """Train path k with its own softmax head; returns the best-validation
    path and head."""
    if not 0 <= k < topology.n_modalities:
        raise ValueError(f"no modality path {k}")
    root = SeededRng(config.seed)
    init_rng = root.split(0, k)
    pre = PretrainedPath(
        random_path(init_rng.split(0), topology.modality_dims[k],
                    topology.path_hidden[k]),
        random_head(init_rng.split(1), topology.path_out_dims[k],
                    topology.n_classes),
    )
    x_train = dataset.train.xs[k]
    y_train = np.asarray(dataset.train.y, dtype=np.int64)
    alpha = config.l2_alpha

    def l2_value():
        if alpha == 0.0:
            return 0.0
        total = sum(float((w**2).sum()) for w in pre.path.weights)
        total += float((pre.head.weight**2).sum())
        return alpha * total

    def train_step(idx, lr, batch_rng):
        x = x_train[idx]
        yb = y_train[idx]
        b_size = x.shape[0]
        if config.input_keep < 1.0:
            x = x * bernoulli_mask(batch_rng.split(0), x.shape,
                                   config.input_keep)
        hidden_masks = None
        if config.hidden_keep < 1.0:
            hidden_masks = [
                bernoulli_mask(batch_rng.split(1, i), (b_size, d),
                               config.hidden_keep)
                for i, d in enumerate(topology.path_hidden[k])
            ]

        # forward
        a = x
        acts_pre, acts_used = [], []
        for i, (w, b) in enumerate(zip(pre.path.weights, pre.path.biases)):
            a_pre = np.tanh(a @ w + b)
            a = a_pre if hidden_masks is None else a_pre * hidden_masks[i]
            acts_pre.append(a_pre)
            acts_used.append(a)
        logits = a @ pre.head.weight + pre.head.bias
        post = apply_softmax_rows(logits)
        objective = _batch_ce(post, yb) + l2_value()

        # backward
        onehot = np.zeros_like(post)
        onehot[np.arange(b_size), yb] = 1.0
        dz = (post - onehot) / b_size
        g_head_w = acts_used[-1].T @ dz + 2.0 * alpha * pre.head.weight
        g_head_b = dz.sum(axis=0)
        d_a = dz @ pre.head.weight.T
        n_layers = len(pre.path.weights)
        gws = [None] * n_layers
        gbs = [None] * n_layers
        for layer in reversed(range(n_layers)):
            if hidden_masks is not None:
                d_a = d_a * hidden_masks[layer]
            dz_l = d_a * (1.0 - acts_pre[layer]**2)
            prev = x if layer == 0 else acts_used[layer - 1]
            gws[layer] = prev.T @ dz_l \
                + 2.0 * alpha * pre.path.weights[layer]
            gbs[layer] = dz_l.sum(axis=0)
            if layer > 0:
                d_a = dz_l @ pre.path.weights[layer].T
        grads = PretrainedPath(PathParams(gws, gbs),
                               HeadParams(g_head_w, g_head_b))
        sgd_step(pre, grads, lr)
        return objective

    def evaluate():
        return evaluate_path(k, pre, dataset.val,
                             input_keep=config.input_keep,
                             hidden_keep=config.hidden_keep)

    log = []
    best, record = _run_stage(
        pre, config, f"pretrain:{k}", root.split(1, k),
        config.max_epochs, x_train.shape[0], train_step, evaluate, log)
    return TrainingRun(best, log, [record])


# --------------------------------------------------------------------------
# fusion training


def fuse_train(pretrained, dataset: ModalityDataset,
               topology: NetworkTopology, config: TrainingConfig,
               stage_plan: StagePlan,
               shared: Optional[SharedParams] = None) -> TrainingRun:
    """Run the fusion stages of the plan on top of pretrained paths.

    The shared stack defaults to the geometric-mean-equivalent block
    initialization from the pretrained heads; pass ``shared`` to start from
    something else (e.g. a random stack). Stage order is validated; a plan
    whose fusion stages are missing is rejected.
    """
    if not isinstance(stage_plan, StagePlan):
        stage_plan = StagePlan(tuple(stage_plan))
    fuse_stages = [s for s in stage_plan.stages
                   if s.kind != StageKind.PRETRAIN]
    if not fuse_stages:
        raise ValueError("stage plan has no fusion stage")

    params = FusionParams(
        [pre.path.copy() for pre in pretrained],
        shared.copy() if shared is not None
        else init_shared_from_pretrained(pretrained, topology),
    )

    keeps = config.moddrop_keeps(topology.n_modalities)
    xs_train = dataset.train.xs
    presence_train = dataset.train.presence
    y_train = np.asarray(dataset.train.y, dtype=np.int64)
    root = SeededRng(config.seed)
    log: list = []
    records: list = []

    for si, stage in enumerate(fuse_stages):
        gamma = 0.0 if stage.kind == StageKind.FUSE_FROZEN else 1.0
        set_gamma(params, gamma)
        moddrop_active = stage.moddrop and keeps is not None

        def train_step(idx, lr, batch_rng):
            xs = [x[idx] for x in xs_train]
            presence = presence_train[idx]
            yb = y_train[idx]
            b_size = yb.shape[0]
            if config.input_keep < 1.0:
                xs = input_dropout_batch(xs, config.input_keep,
                                         batch_rng.split(0))
            if moddrop_active:
                xs, presence, _ = moddrop_batch(xs, presence, keeps,
                                                batch_rng.split(1))
            masks = None
            if config.hidden_keep < 1.0:
                masks = ForwardMasks(
                    path_hidden=_hidden_masks_for_paths(
                        topology, b_size, config.hidden_keep,
                        batch_rng.split(2)),
                    shared_hidden=bernoulli_mask(
                        batch_rng.split(3), (b_size, topology.shared_hidden),
                        config.hidden_keep),
                )
            batch = ModalityBatch(xs, presence, yb)
            posterior, trace = forward_batch(batch, params, topology,
                                             mode="train", masks=masks)
            objective = _batch_ce(posterior, yb) + _l2_value(
                params, topology, trace.gate.mean(axis=0), config.l2_alpha)
            grads = backward_batch(trace, yb, params, config)
            sgd_step(params, grads, lr)
            return objective

        def evaluate():
            return evaluate_fused(params, topology, dataset.val,
                                  input_keep=config.input_keep,
                                  hidden_keep=config.hidden_keep)

        stage_name = stage.kind.name.lower()
        max_epochs = stage.max_epochs if stage.max_epochs is not None \
            else config.max_epochs
        params, record = _run_stage(
            params, config, stage_name, root.split(2, si), max_epochs,
            y_train.shape[0], train_step, evaluate, log)
        records.append(record)

    return TrainingRun(params, log, records)

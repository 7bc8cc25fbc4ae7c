"""Temporal gesture scoring, localization, and evaluation.

Per-frame class scores come from sliding-window classifiers run at several
temporal scales (window strides). The aggregated score of class k at frame
t is the weighted sum, over scales s, of the last 4s+1 per-window outputs:
o_k(t) = sum_s mu_s * sum_{j=-4s..0} o_{s,k}(t+j). Frame labels are the
argmax of the aggregate; contiguous non-rest runs become predicted
intervals. A separate binary motion classifier at stride 1 marks activity
switch points, and predicted interval endpoints snap to the nearest switch
point within a vicinity. Evaluation is the mean Jaccard index over every
(sequence, class) pair present in the ground truth or the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import ModalityBatch, NetworkTopology, PretrainedPath
from .numerics import SeededRng
from .skeleton import FeatureStandardizer, apply_standardizer, \
    fit_standardizer
from .training import ModalityDataset, TrainingConfig, _path_head_forward, \
    pretrain_modality

__all__ = [
    "ScoreSequence",
    "SegmentLabeling",
    "MotionClassifier",
    "aggregate_scores",
    "aggregate_all",
    "predicted_labels",
    "labels_to_intervals",
    "jaccard_index",
    "mean_jaccard",
    "train_motion_classifier",
    "motion_labels",
    "switch_points",
    "refine_boundaries",
    "read_labelings",
    "write_labelings",
]

DEFAULT_SCALES = (2, 3, 4)
DEFAULT_VICINITY = 10


# --------------------------------------------------------------------------
# score sequences


@dataclass
class ScoreSequence:
    """Per-frame, per-scale class scores for one capture.

    scores[s] is a (T, N) array aligned to absolute frame indices; rows
    before valid_from[s] (default 4*s, where the sliding window lacks
    history) hold no score and are skipped by aggregation. weights maps
    each scale to its fusion weight mu_s, default 1.
    """

    scores: dict
    weights: Optional[dict] = None
    valid_from: Optional[dict] = None

    def __post_init__(self):
        if not self.scores:
            raise ValueError("need scores for at least one scale")
        shapes = {a.shape for a in self.scores.values()}
        if len(shapes) != 1:
            raise ValueError(f"scales disagree on array shape: {shapes}")
        for s, a in self.scores.items():
            self.scores[s] = np.asarray(a, dtype=np.float64)
            if not np.isfinite(self.scores[s]).all():
                raise ValueError(f"scores at scale {s} must be finite")
        if self.weights is None:
            self.weights = {s: 1.0 for s in self.scores}
        if self.valid_from is None:
            self.valid_from = {s: 4 * s for s in self.scores}
        for s in self.scores:
            if s not in self.weights or s not in self.valid_from:
                raise ValueError(f"scale {s} lacks a weight or valid range")

    @property
    def n_frames(self) -> int:
        return next(iter(self.scores.values())).shape[0]

    @property
    def n_classes(self) -> int:
        return next(iter(self.scores.values())).shape[1]


def aggregate_scores(seq: ScoreSequence, t: int) -> np.ndarray:
    """Aggregated class scores at frame t (the exact double sum; terms
    whose frame falls outside the scored range are skipped)."""
    if not 0 <= t < seq.n_frames:
        raise ValueError(f"frame {t} outside sequence of {seq.n_frames}")
    out = np.zeros(seq.n_classes)
    for s, table in seq.scores.items():
        lo = max(t - 4 * s, seq.valid_from[s])
        hi = min(t, seq.n_frames - 1)
        if lo > hi:
            continue
        out += seq.weights[s] * table[lo:hi + 1].sum(axis=0)
    return out


def aggregate_all(seq: ScoreSequence) -> np.ndarray:
    """aggregate_scores at every frame, as a (T, N) array."""
    return np.stack([aggregate_scores(seq, t) for t in range(seq.n_frames)])


def predicted_labels(seq: ScoreSequence) -> np.ndarray:
    """l(t) = argmax_k o_k(t) per frame."""
    return aggregate_all(seq).argmax(axis=1)


def labels_to_intervals(labels, rest_class: int = 0) -> list:
    """Contiguous non-rest runs as (class, start, end) with inclusive ends."""
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    start = None
    current = rest_class
    for t, lab in enumerate(labels):
        if lab != current:
            if current != rest_class:
                out.append((int(current), start, t - 1))
            start = t
            current = int(lab)
    if current != rest_class:
        out.append((int(current), start, len(labels) - 1))
    return out


# --------------------------------------------------------------------------
# labelings and the Jaccard measure


@dataclass
class SegmentLabeling:
    """Gesture intervals of one sequence: (class, start, end), ends
    inclusive. n_frames bounds the frame axis; when omitted it is implied
    by the furthest interval end."""

    intervals: tuple
    n_frames: Optional[int] = None

    def __post_init__(self):
        self.intervals = tuple(
            (int(c), int(s), int(e)) for c, s, e in self.intervals
        )
        for c, s, e in self.intervals:
            if s < 0 or e < s:
                raise ValueError(f"bad interval ({c}, {s}, {e})")
            if self.n_frames is not None and e >= self.n_frames:
                raise ValueError(
                    f"interval ({c}, {s}, {e}) exceeds {self.n_frames} frames"
                )

    @property
    def length(self) -> int:
        if self.n_frames is not None:
            return self.n_frames
        return max((e + 1 for _, _, e in self.intervals), default=0)

    def classes(self) -> set:
        return {c for c, _, _ in self.intervals}

    def binary_vector(self, cls: int, n_frames: Optional[int] = None
                      ) -> np.ndarray:
        n = n_frames if n_frames is not None else self.length
        v = np.zeros(n, dtype=bool)
        for c, s, e in self.intervals:
            if c == cls:
                v[s:e + 1] = True
        return v


def jaccard_index(a, b) -> float:
    """|a AND b| / |a OR b| for binary frame vectors; 0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum()) / union


def mean_jaccard(truth: dict, predictions: dict) -> float:
    """Mean of J over every (sequence, class) pair present in the truth or
    the prediction, all pairs weighted equally.

    Both arguments map sequence ids to SegmentLabeling. A sequence absent
    from predictions counts as predicted-empty; a predicted sequence the
    truth never mentions is an error.
    """
    unknown = set(predictions) - set(truth)
    if unknown:
        raise ValueError(f"predictions for unknown sequences: {sorted(unknown)}")
    total = 0.0
    count = 0
    empty = SegmentLabeling(())
    for sid in truth:
        t_lab = truth[sid]
        p_lab = predictions.get(sid, empty)
        n = max(t_lab.length, p_lab.length)
        for cls in sorted(t_lab.classes() | p_lab.classes()):
            total += jaccard_index(t_lab.binary_vector(cls, n),
                                   p_lab.binary_vector(cls, n))
            count += 1
    return total / count if count else 0.0


# --------------------------------------------------------------------------
# labeling files: "sequence_id class start end", one interval per line


def write_labelings(labelings: dict, path) -> None:
    with open(path, "w") as fh:
        for sid in sorted(labelings):
            for c, s, e in labelings[sid].intervals:
                fh.write(f"{sid} {c} {s} {e}\n")


def read_labelings(path, n_frames: Optional[dict] = None) -> dict:
    """Parse a labeling file; n_frames optionally pins sequence lengths."""
    per_seq: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{ln}: expected 'sequence class start end'"
                )
            sid = parts[0]
            c, s, e = (int(p) for p in parts[1:])
            per_seq.setdefault(sid, []).append((c, s, e))
    return {
        sid: SegmentLabeling(
            tuple(ivs),
            None if n_frames is None else n_frames.get(sid))
        for sid, ivs in per_seq.items()
    }


# --------------------------------------------------------------------------
# motion localization


@dataclass
class MotionClassifier:
    """Binary rest/activity classifier over stride-1 dynamic poses."""

    model: PretrainedPath
    standardizer: FeatureStandardizer
    accuracy: float     # held-out accuracy from training

    def posteriors(self, poses) -> np.ndarray:
        x = apply_standardizer(self.standardizer, poses)
        post, _ = _path_head_forward(self.model, x)
        return post

    def predict(self, poses) -> np.ndarray:
        return self.posteriors(poses).argmax(axis=1)


def motion_labels(labeling: SegmentLabeling, n_frames: int) -> np.ndarray:
    """Frame-level activity labels: 1 inside any gesture interval."""
    v = np.zeros(n_frames, dtype=np.int64)
    for _, s, e in labeling.intervals:
        v[s:min(e + 1, n_frames)] = 1
    return v


def train_motion_classifier(poses, labels,
                            config: Optional[TrainingConfig] = None,
                            hidden: int = 300,
                            val_fraction: float = 0.2) -> MotionClassifier:
    """Train the rest/activity classifier on labeled stride-1 poses."""
    x = np.asarray(poses, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("poses and labels do not align")
    classes = np.unique(y)
    if not np.array_equal(classes, [0, 1]):
        raise ValueError(
            f"need both rest (0) and activity (1) samples, got {classes}"
        )
    if config is None:
        config = TrainingConfig(max_epochs=30, patience=5)

    n = x.shape[0]
    n_val = max(int(round(n * val_fraction)), 1)
    perm = SeededRng(config.seed).split(3).permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0 or len(np.unique(y[train_idx])) < 2:
        raise ValueError("training split degenerate after holdout")

    standardizer = fit_standardizer(x[train_idx])
    xs = apply_standardizer(standardizer, x)
    dataset = ModalityDataset(
        train=ModalityBatch([xs[train_idx]], y=y[train_idx]),
        val=ModalityBatch([xs[val_idx]], y=y[val_idx]),
    )
    topology = NetworkTopology((x.shape[1],), ((hidden,),), 2)
    run = pretrain_modality(0, dataset, topology, config)
    accuracy = 1.0 - run.stages[0].best_val_errors / len(val_idx)
    return MotionClassifier(run.params, standardizer, accuracy)


def switch_points(labels) -> np.ndarray:
    """Frames where the activity label changes (marked at the later frame)."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("expected a label vector")
    return np.flatnonzero(labels[1:] != labels[:-1]) + 1


def _snap(x: int, points: np.ndarray, vicinity: int) -> int:
    near = points[np.abs(points - x) <= vicinity]
    if near.size == 0:
        return x
    dist = np.abs(near - x)
    # ties between equidistant switch points go to the earlier frame
    return int(near[np.argmin(dist)])


def refine_boundaries(intervals, switches, vicinity: int = DEFAULT_VICINITY
                      ) -> list:
    """Snap interval endpoints to the nearest switch point within the
    vicinity; endpoints with no switch point in range stay put. Intervals
    that collapse (start ending up past end) are discarded."""
    switches = np.asarray(switches, dtype=np.int64)
    if switches.size > 1 and (np.diff(switches) < 0).any():
        raise ValueError("switch points must be sorted")
    out = []
    for c, s, e in intervals:
        s2 = _snap(int(s), switches, vicinity)
        e2 = _snap(int(e), switches, vicinity)
        if s2 <= e2:
            out.append((int(c), s2, e2))
    return out

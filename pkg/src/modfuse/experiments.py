"""Experiment orchestration: the quartered-digit study and the synthetic
gesture pipeline.

The digit study trains the four-path fusion network on quarter modalities
under a chosen strategy (pretraining, input dropout, whole-modality drops,
shared-stack initialization are all switchable), then walks a fixed
robustness grid: 4 missing-segment rows (0..3 occluded quarters, results
averaged over every quarter subset of that size) and 5 pepper-noise rows
(50% pixel drop on 0..4 quarters, same averaging). Reports are plain TSV
with stable formatting, so identical flags and seed give identical bytes.

The gesture pipeline generates synthetic skeleton streams, trains
per-stride window classifiers plus a binary motion classifier, and scores
test streams with and without boundary refinement at activity switch
points, reporting the mean Jaccard index both ways.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .mnist import load_mnist, occlude_batch, pepper_noise_batch, \
    quarter_split_batch
from .network import ModalityBatch, NetworkTopology, PretrainedPath, \
    random_head, random_path, random_shared
from .numerics import SeededRng
from .skeleton import FeatureStandardizer, apply_standardizer, \
    dynamic_pose_sequence, fit_standardizer
from .synthetic import GESTURE_CLASSES, SyntheticConfig, \
    generate_synthetic_sequence
from .temporal import DEFAULT_VICINITY, ScoreSequence, SegmentLabeling, \
    aggregate_all, labels_to_intervals, mean_jaccard, motion_labels, \
    refine_boundaries, switch_points, train_motion_classifier
from .training import ModalityDataset, StagePlan, TrainingConfig, \
    TrainingRun, _path_head_forward, evaluate_fused, fuse_train, \
    pretrain_modality

__all__ = [
    "parse_architecture",
    "ExperimentConfig",
    "GridRow",
    "ExperimentReport",
    "ComparisonReport",
    "mnist_datasets",
    "train_mnist_model",
    "evaluation_grid",
    "run_mnist_experiment",
    "run_mnist_comparison",
    "format_grid_rows",
    "PipelineConfig",
    "PipelineReport",
    "run_gesture_pipeline",
    "aggregate_seed_reports",
]

N_SEGMENTS = 4
PEPPER_RATE = 0.5


def parse_architecture(text: str) -> NetworkTopology:
    """Parse strings like "196x4-125x4-40-10": per-path widths carry an
    xK multiplicity, then the shared hidden total, then the class count.
    The shared total must equal paths * classes."""
    tokens = text.strip().split("-")
    if len(tokens) < 3:
        raise ValueError(f"architecture {text!r} too short")
    per_path = []
    k_count = None
    for tok in tokens[:-2]:
        m = re.fullmatch(r"(\d+)x(\d+)", tok)
        if not m:
            raise ValueError(
                f"architecture token {tok!r} is not <width>x<paths>"
            )
        width, k = int(m.group(1)), int(m.group(2))
        if k_count is None:
            k_count = k
        elif k != k_count:
            raise ValueError(
                f"architecture {text!r} mixes path counts {k_count} and {k}"
            )
        per_path.append(width)
    shared_total = int(tokens[-2])
    n_classes = int(tokens[-1])
    if k_count is None:
        raise ValueError(f"architecture {text!r} has no per-path layers")
    topology = NetworkTopology(
        modality_dims=(per_path[0],) * k_count,
        path_hidden=(tuple(per_path[1:]),) * k_count,
        n_classes=n_classes,
    )
    if topology.shared_hidden != shared_total:
        raise ValueError(
            f"architecture {text!r} declares {shared_total} shared units, "
            f"but {k_count} paths x {n_classes} classes = "
            f"{topology.shared_hidden}"
        )
    return topology


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "196x4-125x4-40-10"
    pretraining: bool = True
    input_dropout: bool = True
    moddrop: bool = False
    shared_init: bool = True       # geometric-mean block initialization
    input_keep: float = 0.8        # used when input_dropout is on
    moddrop_keep: float = 0.9      # used when moddrop is on
    learning_rate: float = 0.1
    lr_decay: float = 0.98
    batch_size: int = 64
    l2_alpha: float = 1e-4
    pretrain_epochs: int = 80
    frozen_epochs: int = 15
    relaxed_epochs: int = 250
    patience: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.shared_init and not self.pretraining:
            raise ValueError(
                "shared-stack initialization needs pretrained heads"
            )

    def training_config(self, moddrop: Optional[bool] = None,
                        max_epochs: Optional[int] = None) -> TrainingConfig:
        use_moddrop = self.moddrop if moddrop is None else moddrop
        return TrainingConfig(
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            batch_size=self.batch_size,
            max_epochs=self.pretrain_epochs if max_epochs is None
            else max_epochs,
            patience=self.patience,
            l2_alpha=self.l2_alpha,
            input_keep=self.input_keep if self.input_dropout else 1.0,
            moddrop_keep=self.moddrop_keep if use_moddrop else None,
            seed=self.seed,
        )


# --------------------------------------------------------------------------
# data plumbing


def mnist_datasets(data_dir, val_size: int = 10000):
    """Quartered digit data: (ModalityDataset, test ModalityBatch).

    The validation split is the last val_size training images.
    """
    (train_x, train_y), (test_x, test_y) = load_mnist(data_dir)
    if not 0 < val_size < train_x.shape[0]:
        raise ValueError(f"bad validation size {val_size}")
    cut = train_x.shape[0] - val_size
    train_q = quarter_split_batch(train_x[:cut])
    val_q = quarter_split_batch(train_x[cut:])
    test_q = quarter_split_batch(test_x)
    dataset = ModalityDataset(
        train=ModalityBatch(train_q, y=train_y[:cut]),
        val=ModalityBatch(val_q, y=train_y[cut:]),
    )
    return dataset, ModalityBatch(test_q, y=test_y)


# --------------------------------------------------------------------------
# training strategies


def pretrain_all(dataset: ModalityDataset, topology: NetworkTopology,
                 config: TrainingConfig):
    """Pretrain every modality path; returns (paths, runs)."""
    runs = [pretrain_modality(k, dataset, topology, config)
            for k in range(topology.n_modalities)]
    return [run.params for run in runs], runs


def train_mnist_model(config: ExperimentConfig, dataset: ModalityDataset,
                      topology: Optional[NetworkTopology] = None,
                      pretrained=None) -> TrainingRun:
    """Run the flag-selected strategy; pass pretrained paths to reuse them
    across strategies that share the same pretraining."""
    if topology is None:
        topology = parse_architecture(config.architecture)
    if config.pretraining:
        if pretrained is None:
            pretrained, _ = pretrain_all(dataset, topology,
                                         config.training_config())
        plan = StagePlan.standard(
            moddrop=config.moddrop,
            frozen_epochs=config.frozen_epochs,
            relaxed_epochs=config.relaxed_epochs,
        )
        shared = None if config.shared_init else random_shared(
            SeededRng(config.seed).split(4), topology, gamma=0.0)
        return fuse_train(pretrained, dataset, topology,
                          config.training_config(), plan, shared=shared)
    # no pretraining: random everything, single relaxed stage
    rng = SeededRng(config.seed)
    pretrained = [
        PretrainedPath(
            random_path(rng.split(0, k), topology.modality_dims[k],
                        topology.path_hidden[k]),
            random_head(rng.split(0, k, 1), topology.path_out_dims[k],
                        topology.n_classes),
        )
        for k in range(topology.n_modalities)
    ]
    plan = StagePlan.relaxed_only(moddrop=config.moddrop,
                                  max_epochs=config.relaxed_epochs)
    shared = random_shared(rng.split(4), topology, gamma=1.0)
    return fuse_train(pretrained, dataset, topology,
                      config.training_config(), plan, shared=shared)


# --------------------------------------------------------------------------
# robustness grid


@dataclass
class GridRow:
    label: str
    errors: float        # mean error count over subset draws
    error_pct: float


@dataclass
class ExperimentReport:
    name: str
    rows: list
    stages: list = field(default_factory=list)

    @property
    def clean_errors(self) -> int:
        for row in self.rows:
            if row.label == "missing:0":
                return int(round(row.errors))
        raise ValueError("report lacks the clean row")

    def row(self, label: str) -> GridRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)


def _segment_subsets(m: int):
    return list(itertools.combinations(range(N_SEGMENTS), m))


def evaluation_grid(params, topology: NetworkTopology,
                    test: ModalityBatch, input_keep: float,
                    seed: int) -> list:
    """The 9-row robustness grid. Occlusion and noise rows with m > 0 are
    averaged over all C(4, m) quarter subsets; pepper draws are seeded per
    subset so the grid is deterministic."""
    n = test.n
    rng = SeededRng(seed)
    rows = []

    def run(xs, presence):
        batch = ModalityBatch(xs, presence, test.y)
        _, errors = evaluate_fused(params, topology, batch,
                                   input_keep=input_keep)
        return errors

    for m in range(N_SEGMENTS):
        subs = _segment_subsets(m)
        errs = []
        for sub in subs:
            xs, presence = occlude_batch(test.xs, sub)
            errs.append(run(xs, presence))
        mean_err = float(np.mean(errs))
        rows.append(GridRow(f"missing:{m}", mean_err, 100.0 * mean_err / n))

    for m in range(N_SEGMENTS + 1):
        subs = _segment_subsets(m)
        errs = []
        for si, sub in enumerate(subs):
            if m == 0:
                xs = test.xs
            else:
                xs = pepper_noise_batch(test.xs, PEPPER_RATE,
                                        rng.split(m, si), sub)
            errs.append(run(xs, test.presence))
        mean_err = float(np.mean(errs))
        rows.append(GridRow(f"pepper50:{m}", mean_err,
                            100.0 * mean_err / n))
    return rows


def format_grid_rows(reports) -> str:
    """Side-by-side TSV of one or more reports over the same grid."""
    reports = list(reports)
    header = ["perturbation"] + [f"{r.name}_errors" for r in reports] \
        + [f"{r.name}_pct" for r in reports]
    lines = ["\t".join(header)]
    for row in reports[0].rows:
        cells = [row.label]
        cells += [f"{r.row(row.label).errors:.1f}" for r in reports]
        cells += [f"{r.row(row.label).error_pct:.4f}" for r in reports]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def run_mnist_experiment(config: ExperimentConfig, data_dir,
                         dataset=None, test=None,
                         pretrained=None) -> ExperimentReport:
    """Train one strategy and walk the robustness grid."""
    if dataset is None or test is None:
        dataset, test = mnist_datasets(data_dir)
    topology = parse_architecture(config.architecture)
    run = train_mnist_model(config, dataset, topology, pretrained=pretrained)
    input_keep = config.input_keep if config.input_dropout else 1.0
    rows = evaluation_grid(run.params, topology, test, input_keep,
                           config.seed)
    name = "moddrop" if config.moddrop else "dropout"
    return ExperimentReport(name, rows, run.stages)


@dataclass
class ComparisonReport:
    dropout: ExperimentReport
    moddrop: ExperimentReport

    def format(self) -> str:
        return format_grid_rows([self.dropout, self.moddrop])


def run_mnist_comparison(config: ExperimentConfig, data_dir,
                         dataset=None, test=None) -> ComparisonReport:
    """Dropout-only vs added whole-modality drops, sharing pretraining."""
    if dataset is None or test is None:
        dataset, test = mnist_datasets(data_dir)
    topology = parse_architecture(config.architecture)
    pretrained = None
    if config.pretraining:
        base = replace(config, moddrop=False)
        pretrained, _ = pretrain_all(dataset, topology,
                                     base.training_config())
    drop_report = run_mnist_experiment(
        replace(config, moddrop=False), None, dataset, test, pretrained)
    mod_report = run_mnist_experiment(
        replace(config, moddrop=True), None, dataset, test, pretrained)
    return ComparisonReport(drop_report, mod_report)


def aggregate_seed_reports(reports) -> str:
    """Merge same-shape reports from different seeds: mean and spread."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    names = [r.name for r in reports]
    if len(set(names)) != 1:
        raise ValueError(f"reports disagree on strategy: {sorted(set(names))}")
    labels = [row.label for row in reports[0].rows]
    lines = ["perturbation\truns\tmean_pct\tmin_pct\tmax_pct"]
    for label in labels:
        pcts = [r.row(label).error_pct for r in reports]
        lines.append(
            f"{label}\t{len(pcts)}\t{np.mean(pcts):.4f}"
            f"\t{min(pcts):.4f}\t{max(pcts):.4f}"
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# synthetic gesture pipeline


@dataclass(frozen=True)
class PipelineConfig:
    n_train_sequences: int = 4
    n_test_sequences: int = 2
    strides: tuple = (2, 3, 4)
    hidden: int = 40               # per-stride gesture classifier width
    motion_hidden: int = 300
    vicinity: int = DEFAULT_VICINITY
    max_epochs: int = 12
    learning_rate: float = 0.05
    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def sequence_seed(self, split: str, i: int) -> int:
        base = {"train": 1, "test": 2}[split]
        return self.seed * 100003 + base * 10007 + i


@dataclass
class PipelineReport:
    per_class_without: dict
    per_class_with: dict
    mean_without: float
    mean_with: float
    motion_accuracy: float

    def format(self) -> str:
        lines = ["class\tjaccard_raw\tjaccard_refined"]
        for cls in sorted(self.per_class_without):
            name = GESTURE_CLASSES[cls - 1]
            lines.append(
                f"{name}\t{self.per_class_without[cls]:.4f}"
                f"\t{self.per_class_with[cls]:.4f}"
            )
        lines.append(
            f"mean\t{self.mean_without:.4f}\t{self.mean_with:.4f}"
        )
        lines.append(f"motion_accuracy\t{self.motion_accuracy:.4f}\t-")
        return "\n".join(lines) + "\n"


def _frame_classes(labeling: SegmentLabeling, n_frames: int) -> np.ndarray:
    v = np.zeros(n_frames, dtype=np.int64)
    for c, s, e in labeling.intervals:
        v[s:e + 1] = c
    return v


def _classifier_scores(pre: PretrainedPath,
                       standardizer: FeatureStandardizer,
                       poses: np.ndarray) -> np.ndarray:
    post, _ = _path_head_forward(pre, apply_standardizer(standardizer, poses))
    return post


def run_gesture_pipeline(config: PipelineConfig) -> PipelineReport:
    n_classes = len(GESTURE_CLASSES) + 1

    train_seqs = [generate_synthetic_sequence(config.sequence_seed("train", i),
                                              config.synthetic)
                  for i in range(config.n_train_sequences)]
    test_seqs = [generate_synthetic_sequence(config.sequence_seed("test", i),
                                             config.synthetic)
                 for i in range(config.n_test_sequences)]

    tc = TrainingConfig(learning_rate=config.learning_rate,
                        max_epochs=config.max_epochs, patience=5,
                        seed=config.seed)

    # per-stride gesture classifiers on pooled training poses
    classifiers = {}
    for s in config.strides:
        xs, ys = [], []
        for positions, truth in train_seqs:
            poses, first = dynamic_pose_sequence(positions, s)
            frame_cls = _frame_classes(truth, positions.shape[0])
            xs.append(poses)
            ys.append(frame_cls[first:])
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        standardizer = fit_standardizer(x)
        n = x.shape[0]
        n_val = max(n // 5, 1)
        perm = SeededRng(config.seed).split(20, s).permutation(n)
        xs_std = apply_standardizer(standardizer, x)
        dataset = ModalityDataset(
            train=ModalityBatch([xs_std[perm[n_val:]]], y=y[perm[n_val:]]),
            val=ModalityBatch([xs_std[perm[:n_val]]], y=y[perm[:n_val]]),
        )
        topology = NetworkTopology((x.shape[1],), ((config.hidden,),),
                                   n_classes)
        run = pretrain_modality(0, dataset, topology, tc)
        classifiers[s] = (run.params, standardizer)

    # stride-1 motion classifier
    m_xs, m_ys = [], []
    for positions, truth in train_seqs:
        poses, first = dynamic_pose_sequence(positions, 1)
        m_xs.append(poses)
        m_ys.append(motion_labels(truth, positions.shape[0])[first:])
    motion = train_motion_classifier(
        np.concatenate(m_xs), np.concatenate(m_ys), tc,
        hidden=config.motion_hidden)

    # score test sequences both ways
    truth = {}
    raw_pred = {}
    refined_pred = {}
    for i, (positions, seq_truth) in enumerate(test_seqs):
        sid = f"seq{i}"
        t_len = positions.shape[0]
        truth[sid] = seq_truth
        scores = {}
        for s in config.strides:
            poses, first = dynamic_pose_sequence(positions, s)
            table = np.zeros((t_len, n_classes))
            params, standardizer = classifiers[s]
            table[first:] = _classifier_scores(params, standardizer, poses)
            scores[s] = table
        seq_scores = ScoreSequence(scores)
        labels = aggregate_all(seq_scores).argmax(axis=1)
        intervals = labels_to_intervals(labels)
        raw_pred[sid] = SegmentLabeling(tuple(intervals), t_len)

        poses1, first1 = dynamic_pose_sequence(positions, 1)
        m_lab = np.empty(t_len, dtype=np.int64)
        m_lab[first1:] = motion.predict(poses1)
        m_lab[:first1] = m_lab[first1]
        refined = refine_boundaries(intervals, switch_points(m_lab),
                                    config.vicinity)
        refined_pred[sid] = SegmentLabeling(tuple(refined), t_len)

    def per_class(preds):
        out = {}
        for cls in range(1, n_classes):
            t_sub = {}
            p_sub = {}
            seen = False
            for sid in truth:
                t_ivs = tuple(iv for iv in truth[sid].intervals
                              if iv[0] == cls)
                p_ivs = tuple(iv for iv in preds[sid].intervals
                              if iv[0] == cls)
                if t_ivs or p_ivs:
                    seen = True
                t_sub[sid] = SegmentLabeling(t_ivs, truth[sid].length)
                p_sub[sid] = SegmentLabeling(p_ivs, preds[sid].length)
            if seen:
                out[cls] = mean_jaccard(
                    {sid: lab for sid, lab in t_sub.items()
                     if lab.intervals or p_sub[sid].intervals},
                    {sid: lab for sid, lab in p_sub.items()
                     if lab.intervals or t_sub[sid].intervals})
        return out

    return PipelineReport(
        per_class_without=per_class(raw_pred),
        per_class_with=per_class(refined_pred),
        mean_without=mean_jaccard(truth, raw_pred),
        mean_with=mean_jaccard(truth, refined_pred),
        motion_accuracy=motion.accuracy,
    )

"""Command line front end.

Subcommands cover the full workflow: pretrain (per-modality paths on the
quartered digits), fuse (staged fusion training on top of saved paths),
eval (robustness grid for a saved model), mnist-experiment (the full
dropout vs moddrop comparison), pose-extract (skeleton capture file to
descriptor matrix), pipeline-run (synthetic gesture localization study)
and report (aggregate grid reports from several seeds).

All commands accept --seed, --config (an INI file overriding experiment
defaults), --data-dir and --out. Output files are plain TSV with fixed
formatting; a command run twice with the same flags and seed writes
byte-identical reports.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .experiments import ExperimentConfig, ExperimentReport, GridRow, \
    PipelineConfig, aggregate_seed_reports, evaluation_grid, \
    format_grid_rows, mnist_datasets, parse_architecture, \
    run_gesture_pipeline, run_mnist_comparison
from .persistence import load_model, save_matrix, save_model
from .skeleton import descriptor_sequence, dynamic_pose_sequence, \
    read_capture
from .synthetic import SyntheticConfig
from .training import StagePlan, evaluate_fused, evaluate_path, format_log, \
    fuse_train, pretrain_modality

__all__ = ["main", "build_parser"]


# --------------------------------------------------------------------------
# config file handling


def _coerce(text: str, default):
    if isinstance(default, bool):
        states = configparser.ConfigParser.BOOLEAN_STATES
        key = text.strip().lower()
        if key not in states:
            raise ValueError(f"not a boolean: {text!r}")
        return states[key]
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(t) for t in text.replace(",", " ").split())
    return text


def _section_overrides(cp: configparser.ConfigParser, section: str,
                       defaults) -> dict:
    if not cp.has_section(section):
        return {}
    known = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
    out = {}
    for key, value in cp.items(section):
        if key not in known:
            raise ValueError(f"unknown key {key!r} in [{section}]")
        out[key] = _coerce(value, known[key])
    return out


def _read_config(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    return cp


def experiment_config(args) -> ExperimentConfig:
    cp = _read_config(args.config)
    overrides = _section_overrides(cp, "experiment", ExperimentConfig())
    overrides.pop("seed", None)
    config = replace(ExperimentConfig(), **overrides)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def pipeline_config(args) -> PipelineConfig:
    cp = _read_config(args.config)
    synth = replace(SyntheticConfig(),
                    **_section_overrides(cp, "synthetic", SyntheticConfig()))
    overrides = _section_overrides(cp, "pipeline", PipelineConfig())
    overrides.pop("seed", None)
    config = replace(PipelineConfig(), synthetic=synth, **overrides)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


# --------------------------------------------------------------------------
# output helpers


def _write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _emit(args, name: str, text: str):
    """Write to --out (a directory) or stdout when --out is missing."""
    if args.out is None:
        sys.stdout.write(text)
    else:
        _write_text(Path(args.out) / name, text)


# --------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    config = experiment_config(args)
    topology = parse_architecture(config.architecture)
    dataset, test = mnist_datasets(args.data_dir)
    tc = config.training_config()
    out = Path(args.out) if args.out is not None else Path("runs/pretrain")
    out.mkdir(parents=True, exist_ok=True)
    log_entries = []
    lines = ["modality\tval_errors\ttest_errors"]
    for k in range(topology.n_modalities):
        run = pretrain_modality(k, dataset, topology, tc)
        log_entries.extend(run.log)
        save_model(run.params, out / f"path{k}.model",
                   input_keep=tc.input_keep, modality=k)
        _, test_errors = evaluate_path(k, run.params, test,
                                       input_keep=tc.input_keep)
        lines.append(
            f"{k}\t{run.stages[-1].best_val_errors}\t{test_errors}"
        )
    _write_text(out / "pretrain_log.tsv", format_log(log_entries))
    _write_text(out / "pretrain_summary.tsv", "\n".join(lines) + "\n")
    sys.stdout.write(f"saved {topology.n_modalities} path models to {out}\n")
    return 0


def cmd_fuse(args) -> int:
    config = experiment_config(args)
    topology = parse_architecture(config.architecture)
    dataset, test = mnist_datasets(args.data_dir)
    pre_dir = Path(args.pretrained)
    pretrained = []
    for k in range(topology.n_modalities):
        loaded = load_model(pre_dir / f"path{k}.model")
        if loaded.kind != "path":
            raise ValueError(f"{pre_dir}/path{k}.model is not a path model")
        pretrained.append(loaded.params)
    plan = StagePlan.standard(moddrop=config.moddrop,
                              frozen_epochs=config.frozen_epochs,
                              relaxed_epochs=config.relaxed_epochs)
    tc = config.training_config()
    run = fuse_train(pretrained, dataset, topology, tc, plan)
    out = Path(args.out) if args.out is not None else Path("runs/fuse")
    out.mkdir(parents=True, exist_ok=True)
    save_model(run.params, out / "fused.model", topology=topology,
               input_keep=tc.input_keep)
    _write_text(out / "fuse_log.tsv", format_log(run.log))
    _, test_errors = evaluate_fused(run.params, topology, test,
                                    input_keep=tc.input_keep)
    _write_text(out / "fuse_summary.tsv",
                f"test_errors\t{test_errors}\n")
    sys.stdout.write(f"saved fused model to {out} "
                     f"(test errors {test_errors})\n")
    return 0


def cmd_eval(args) -> int:
    loaded = load_model(args.model)
    if loaded.kind != "fusion":
        raise ValueError(f"{args.model} is not a fusion model")
    _, test = mnist_datasets(args.data_dir)
    seed = args.seed if args.seed is not None else 0
    rows = evaluation_grid(loaded.params, loaded.topology, test,
                           loaded.input_keep, seed)
    report = ExperimentReport(args.name, rows)
    _emit(args, "robustness.tsv", format_grid_rows([report]))
    return 0


def cmd_mnist_experiment(args) -> int:
    config = experiment_config(args)
    comparison = run_mnist_comparison(config, args.data_dir)
    text = comparison.format()
    _emit(args, "robustness.tsv", text)
    if args.out is not None:
        stage_lines = ["strategy\tstage\tbest_val_errors\tepochs"]
        for rep in (comparison.dropout, comparison.moddrop):
            for st in rep.stages:
                stage_lines.append(
                    f"{rep.name}\t{st.stage}\t{st.best_val_errors}"
                    f"\t{st.epochs_run}"
                )
        _write_text(Path(args.out) / "training_summary.tsv",
                    "\n".join(stage_lines) + "\n")
    return 0


def cmd_pose_extract(args) -> int:
    frames = read_capture(args.input)
    positions = frames.reshape(-1, 11, 3)
    if args.static:
        matrix = descriptor_sequence(positions, sigma=args.sigma)
    else:
        matrix, _ = dynamic_pose_sequence(positions, args.stride,
                                          sigma=args.sigma,
                                          mirror=not args.no_mirror)
    out = args.out if args.out is not None else Path("poses.mat")
    save_matrix(np.asarray(matrix), out)
    sys.stdout.write(
        f"wrote {matrix.shape[0]} x {matrix.shape[1]} matrix to {out}\n"
    )
    return 0


def cmd_pipeline_run(args) -> int:
    config = pipeline_config(args)
    report = run_gesture_pipeline(config)
    _emit(args, "pipeline.tsv", report.format())
    return 0


def _parse_grid_report(path) -> list:
    """Read a robustness TSV back into ExperimentReports (one per
    strategy column pair)."""
    with open(path) as fh:
        rows = [line.rstrip("\n").split("\t") for line in fh
                if line.strip()]
    header, body = rows[0], rows[1:]
    if header[0] != "perturbation":
        raise ValueError(f"{path}: not a robustness report")
    names = [h[:-len("_errors")] for h in header[1:]
             if h.endswith("_errors")]
    reports = []
    for name in names:
        e_col = header.index(f"{name}_errors")
        p_col = header.index(f"{name}_pct")
        grid = [GridRow(r[0], float(r[e_col]), float(r[p_col]))
                for r in body]
        reports.append(ExperimentReport(name, grid))
    return reports


def cmd_report(args) -> int:
    by_name = {}
    for path in args.inputs:
        for rep in _parse_grid_report(path):
            by_name.setdefault(rep.name, []).append(rep)
    sections = []
    for name in sorted(by_name):
        sections.append(f"strategy\t{name}\n"
                        + aggregate_seed_reports(by_name[name]))
    _emit(args, "aggregate.tsv", "\n".join(sections))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modfuse",
        description="multimodal fusion training and evaluation tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, data_default="data/mnist"):
        sp.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
        sp.add_argument("--config", type=Path, default=None,
                        help="INI file with experiment settings")
        sp.add_argument("--data-dir", type=Path, default=Path(data_default),
                        help="directory with the digit data files")
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: stdout or runs/)")
        return sp

    sp = common(sub.add_parser(
        "pretrain", help="train one classifier per modality path"))
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser(
        "fuse", help="staged fusion training from saved path models"))
    sp.add_argument("--pretrained", type=Path, default=Path("runs/pretrain"),
                    help="directory with path models from pretrain")
    sp.set_defaults(func=cmd_fuse)

    sp = common(sub.add_parser(
        "eval", help="robustness grid for a saved fusion model"))
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--name", default="model",
                    help="column label in the report")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser(
        "mnist-experiment",
        help="dropout vs moddrop robustness comparison"))
    sp.set_defaults(func=cmd_mnist_experiment)

    sp = common(sub.add_parser(
        "pose-extract", help="descriptor matrix from a capture file"))
    sp.add_argument("--input", type=Path, required=True,
                    help="capture file, one 33-value frame per line")
    sp.add_argument("--stride", type=int, default=2)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--static", action="store_true",
                    help="per-frame descriptors instead of windows")
    sp.add_argument("--no-mirror", action="store_true",
                    help="skip left-hand mirroring")
    sp.set_defaults(func=cmd_pose_extract)

    sp = common(sub.add_parser(
        "pipeline-run", help="synthetic gesture localization study"))
    sp.set_defaults(func=cmd_pipeline_run)

    sp = common(sub.add_parser(
        "report", help="aggregate robustness reports across seeds"))
    sp.add_argument("inputs", nargs="+", type=Path,
                    help="robustness TSV files to merge")
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

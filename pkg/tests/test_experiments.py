import numpy as np
import numpy.testing as npt
import pytest

from conftest import DATA_DIR, make_fusion_params, random_batch_arrays
from modfuse.experiments import (ExperimentConfig, evaluation_grid,
                                 format_grid_rows, mnist_datasets,
                                 parse_architecture, run_mnist_experiment)
from modfuse.network import ModalityBatch
from modfuse.training import ModalityDataset


def test_parse_architecture_default_shape():
    topo = parse_architecture("196x4-125x4-40-10")
    assert topo.modality_dims == (196,) * 4
    assert topo.path_hidden == ((125,),) * 4
    assert topo.n_classes == 10
    assert topo.shared_hidden == 40


def test_parse_architecture_multilayer_paths():
    topo = parse_architecture("32x2-16x2-8x2-4-2")
    assert topo.modality_dims == (32, 32)
    assert topo.path_hidden == ((16, 8), (16, 8))
    assert topo.shared_hidden == 4


@pytest.mark.parametrize("text, hint", [
    ("40-10", "too short"),
    ("196-40-10", "not <width>x<paths>"),
    ("196x4-125x3-40-10", "mixes path counts"),
    ("196x4-125x4-33-10", "declares 33 shared units"),
])
def test_parse_architecture_rejects(text, hint):
    with pytest.raises(ValueError, match=hint):
        parse_architecture(text)


def test_training_config_flag_mapping():
    cfg = ExperimentConfig(input_dropout=False, moddrop=False)
    tc = cfg.training_config()
    assert tc.input_keep == 1.0
    assert tc.moddrop_keep is None
    assert tc.max_epochs == cfg.pretrain_epochs

    hot = ExperimentConfig(moddrop=True).training_config(max_epochs=3)
    assert hot.input_keep == 0.8
    assert hot.moddrop_keep == 0.9
    assert hot.max_epochs == 3
    # the per-call override beats the stored flag
    assert ExperimentConfig(moddrop=True).training_config(
        moddrop=False).moddrop_keep is None


def test_shared_init_requires_pretraining():
    with pytest.raises(ValueError, match="pretrained heads"):
        ExperimentConfig(pretraining=False, shared_init=True)


# ---------------------------------------------------------------------------
# robustness grid


@pytest.fixture
def grid_setup():
    topo = parse_architecture("6x4-5x4-16-4")
    _, params = make_fusion_params(topo, seed=3)
    xs, y = random_batch_arrays(topo, 120, seed=1)
    return params, topo, ModalityBatch(xs, y=y)


def test_grid_rows_complete_and_deterministic(grid_setup):
    params, topo, batch = grid_setup
    rows = evaluation_grid(params, topo, batch, 0.9, seed=7)
    labels = [row.label for row in rows]
    assert labels == [f"missing:{m}" for m in range(4)] \
        + [f"pepper50:{m}" for m in range(5)]
    again = evaluation_grid(params, topo, batch, 0.9, seed=7)
    for row, rerow in zip(rows, again):
        assert row.errors == rerow.errors
    for row in rows:
        npt.assert_allclose(row.error_pct, 100.0 * row.errors / batch.n)


def test_grid_clean_rows_agree(grid_setup):
    """missing:0 and pepper50:0 both evaluate the untouched batch."""
    params, topo, batch = grid_setup
    rows = {row.label: row for row in
            evaluation_grid(params, topo, batch, 0.9, seed=7)}
    assert rows["missing:0"].errors == rows["pepper50:0"].errors


def test_format_grid_rows_side_by_side(grid_setup):
    params, topo, batch = grid_setup
    from modfuse.experiments import ExperimentReport
    rows = evaluation_grid(params, topo, batch, 0.9, seed=7)
    text = format_grid_rows([ExperimentReport("a", rows),
                             ExperimentReport("b", rows)])
    lines = text.splitlines()
    assert lines[0] == "perturbation\ta_errors\tb_errors\ta_pct\tb_pct"
    assert len(lines) == 10
    first = lines[1].split("\t")
    assert first[0] == "missing:0" and first[1] == first[2]


# ---------------------------------------------------------------------------
# strategy ordering at reduced scale


def test_pretraining_and_dropout_beat_vanilla():
    """A short-budget run on a training subset: the pretrained + input
    dropout strategy must come out ahead of no-pretraining/no-dropout."""
    dataset, test = mnist_datasets(DATA_DIR)
    small = ModalityDataset(
        train=ModalityBatch([x[:4000] for x in dataset.train.xs],
                            y=dataset.train.y[:4000]),
        val=ModalityBatch([x[:1500] for x in dataset.val.xs],
                          y=dataset.val.y[:1500]),
    )
    small_test = ModalityBatch([x[:2500] for x in test.xs], y=test.y[:2500])
    cfg = ExperimentConfig(pretrain_epochs=8, frozen_epochs=4,
                           relaxed_epochs=12, patience=6, seed=1)
    tuned = run_mnist_experiment(cfg, None, small, small_test)
    vanilla_cfg = ExperimentConfig(
        pretraining=False, input_dropout=False, shared_init=False,
        pretrain_epochs=8, frozen_epochs=4, relaxed_epochs=12, patience=6,
        seed=1)
    vanilla = run_mnist_experiment(vanilla_cfg, None, small, small_test)
    assert tuned.clean_errors < vanilla.clean_errors

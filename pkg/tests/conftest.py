import numpy as np
import pytest

from modfuse.network import (FusionParams, NetworkTopology, PretrainedPath,
                             init_shared_from_pretrained, random_head,
                             random_path)
from modfuse.numerics import SeededRng

DATA_DIR = "data/mnist"


def small_topology(activation="tanh"):
    return NetworkTopology(
        modality_dims=(5, 7, 4),
        path_hidden=((8, 6), (9,), (6, 5)),
        n_classes=4,
        shared_activation=activation,
    )


def make_pretrained(topology, seed=0):
    rng = SeededRng(seed)
    return [
        PretrainedPath(
            random_path(rng.split(0, k), topology.modality_dims[k],
                        topology.path_hidden[k]),
            random_head(rng.split(1, k), topology.path_out_dims[k],
                        topology.n_classes),
        )
        for k in range(topology.n_modalities)
    ]


def make_fusion_params(topology, seed=0):
    pre = make_pretrained(topology, seed)
    return pre, FusionParams([p.path.copy() for p in pre],
                             init_shared_from_pretrained(pre, topology))


def random_batch_arrays(topology, n, seed=0):
    rng = SeededRng(seed)
    xs = [rng.split(2, k).normal(size=(n, d))
          for k, d in enumerate(topology.modality_dims)]
    y = rng.split(3).integers(0, topology.n_classes, n)
    return xs, y


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def topo():
    return small_topology()


@pytest.fixture
def topo_linear():
    return small_topology("linear")

import numpy as np
import pytest

from kmpc.data import VanDerPol, build_cluster_dataset, build_observation_grid, padua_degree
from kmpc.experiment import ExperimentConfig
from kmpc.surrogate import fit_control_affine


@pytest.fixture(scope="session")
def plant():
    return VanDerPol()


@pytest.fixture(scope="session")
def dataset352(plant):
    nodes = build_observation_grid(padua_degree(352), plant.sample_box)
    return build_cluster_dataset(plant, nodes, np.sqrt(2) / 352, 25, seed=0)


@pytest.fixture(scope="session")
def config352():
    return ExperimentConfig(d=352)


@pytest.fixture(scope="session")
def model352(dataset352, config352):
    return fit_control_affine(dataset352, config352.kernel_spec(), pi_variant=True)


@pytest.fixture(scope="session")
def model352_plain(dataset352, config352):
    return fit_control_affine(dataset352, config352.kernel_spec(), pi_variant=False)


@pytest.fixture(scope="session")
def bounds352(config352, model352):
    from kmpc.experiment import stage_bounds

    return stage_bounds(config352, model352)


@pytest.fixture(scope="session")
def mpc352(config352, model352, bounds352):
    from kmpc.experiment import stage_terminal

    cfg, report = stage_terminal(config352, model352, bounds352.eta, bounds352.lbar)
    assert cfg is not None, report
    return cfg

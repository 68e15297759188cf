import numpy as np
import pytest

from simgap import cli


def run_preset(directory, name, workers=2):
    cfg = cli.load_config(name, out=directory)
    cli.run_pipeline(cfg, workers=workers)
    return cfg


@pytest.fixture(scope="session")
def pendulum_run(tmp_path_factory):
    return run_preset(tmp_path_factory.mktemp("pendulum_desk"), "pendulum_desk")


@pytest.fixture(scope="session")
def mecanum_run(tmp_path_factory):
    return run_preset(tmp_path_factory.mktemp("mecanum_desk"), "mecanum_desk")


@pytest.fixture(scope="session")
def coarse_run(tmp_path_factory):
    cfg = cli.load_config("mecanum_coarse", out=tmp_path_factory.mktemp("mecanum_coarse"))
    for stage in ("cover", "collect", "train", "estimate", "certify"):
        cli.run_stage(cfg, stage, workers=2)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
